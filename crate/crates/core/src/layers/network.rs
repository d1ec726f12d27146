use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::norm::{BatchNormCache, RunningStats};
use super::{activation, conv, dense, norm, pool, LayerSpec, Mode};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Layer topology plus the per-sample input shape and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

/// Optional regularisation inserted by the stream builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamOptions {
    /// Batch norm after every convolution.
    pub batch_norm: bool,
    /// Keep probability of a dropout layer before the classifier; 1 disables it.
    pub dropout_keep: f64,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self { batch_norm: false, dropout_keep: 1.0 }
    }
}

impl NetworkConfig {
    /// Per-layer output shapes, starting with the input shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(shapes.last().unwrap()).map_err(|e| match e {
                Error::Shape(msg) => shape_err!("layer {i} ({}): {msg}", layer.kind()),
                other => other,
            })?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let last = shapes.last().unwrap();
        if last.as_slice() != [self.classes] {
            return Err(shape_err!(
                "network emits {last:?} but {} classes are configured",
                self.classes
            ));
        }
        Ok(())
    }

    /// Spatial 2D stream: `conv3x3 [-> bn] -> relu -> pool 2x2` per width, then
    /// `[dropout ->] fc`.
    pub fn stream_2d(
        input: [usize; 3],
        widths: &[usize],
        classes: usize,
        opts: StreamOptions,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut channels = input[0];
        for &w in widths {
            layers.push(LayerSpec::conv2d_same(channels, w));
            if opts.batch_norm {
                layers.push(LayerSpec::batch_norm(w));
            }
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool3d { window: [1, 2, 2] });
            channels = w;
        }
        Self::finish(input.to_vec(), layers, classes, opts)
    }

    /// 3D volume stream. Pools follow convolutions 1, 2, 4, 6, 8, ...; the
    /// first pool keeps the temporal axis (1x2x2), later ones are 2x2x2. With
    /// eight widths this is the eight-convolution, five-pool topology.
    pub fn stream_3d(
        input: [usize; 4],
        widths: &[usize],
        classes: usize,
        opts: StreamOptions,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut channels = input[0];
        for (i, &w) in widths.iter().enumerate() {
            layers.push(LayerSpec::conv3d_same(channels, w));
            if opts.batch_norm {
                layers.push(LayerSpec::batch_norm(w));
            }
            layers.push(LayerSpec::Relu);
            if i == 0 {
                layers.push(LayerSpec::MaxPool3d { window: [1, 2, 2] });
            } else if i == 1 || (i >= 3 && i % 2 == 1) {
                layers.push(LayerSpec::MaxPool3d { window: [2, 2, 2] });
            }
            channels = w;
        }
        Self::finish(input.to_vec(), layers, classes, opts)
    }

    fn finish(
        input_shape: Vec<usize>,
        mut layers: Vec<LayerSpec>,
        classes: usize,
        opts: StreamOptions,
    ) -> Result<Self> {
        if opts.dropout_keep < 1.0 {
            layers.push(LayerSpec::Dropout { keep: opts.dropout_keep });
        }
        let probe = Self { input_shape: input_shape.clone(), layers: layers.clone(), classes };
        let features: usize = probe.shapes()?.last().unwrap().iter().product();
        layers.push(LayerSpec::FullyConnected { in_features: features, out_features: classes });
        let cfg = Self { input_shape, layers, classes };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies (weights yes; biases and norm scales no).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    fn new(name: String, value: Tensor<T>, decay: bool) -> Self {
        let grad = value.zeros_like();
        Self { name, value, grad, decay }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    Inputs(Vec<Tensor<T>>),
    Pool { shape: Vec<usize>, argmax: Vec<Vec<usize>> },
    Masks(Vec<Tensor<T>>),
    Norm(BatchNormCache<T>),
    Outputs(Vec<Tensor<T>>),
}

#[derive(Clone, Debug)]
struct Layer<T> {
    spec: LayerSpec,
    params: Vec<Param<T>>,
    stats: Option<RunningStats<T>>,
    cache: Option<Cache<T>>,
}

/// A sequential network: parameters, gradient buffers, batch-norm running
/// statistics and the activations retained by the last training pass.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    layers: Vec<Layer<T>>,
    rng: ChaCha8Rng,
    need_input_grad: bool,
}

fn glorot<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect())
}

fn per_sample<T: Real, F>(inputs: &[Tensor<T>], f: F) -> Result<Vec<Tensor<T>>>
where
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Sync + Send,
{
    inputs.par_iter().map(f).collect()
}

impl<T: Real> Network<T> {
    /// Builds a network with Glorot-uniform weights and zero biases drawn from
    /// `seed`; the same seed also drives dropout masks.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        for (i, spec) in config.layers.iter().enumerate() {
            let mut params = Vec::new();
            let mut stats = None;
            match *spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                    let k = kernel[0] * kernel[1];
                    let shape = [out_channels, in_channels, kernel[0], kernel[1]];
                    params.push(Param::new(
                        format!("{i}.weight"),
                        glorot(&shape, in_channels * k, out_channels * k, &mut rng)?,
                        true,
                    ));
                    params.push(Param::new(format!("{i}.bias"), Tensor::zeros(&[out_channels])?, false));
                }
                LayerSpec::Conv3d { in_channels, out_channels, kernel, .. } => {
                    let k: usize = kernel.iter().product();
                    let shape = [out_channels, in_channels, kernel[0], kernel[1], kernel[2]];
                    params.push(Param::new(
                        format!("{i}.weight"),
                        glorot(&shape, in_channels * k, out_channels * k, &mut rng)?,
                        true,
                    ));
                    params.push(Param::new(format!("{i}.bias"), Tensor::zeros(&[out_channels])?, false));
                }
                LayerSpec::FullyConnected { in_features, out_features } => {
                    params.push(Param::new(
                        format!("{i}.weight"),
                        glorot(&[out_features, in_features], in_features, out_features, &mut rng)?,
                        true,
                    ));
                    params.push(Param::new(format!("{i}.bias"), Tensor::zeros(&[out_features])?, false));
                }
                LayerSpec::BatchNorm { channels, momentum, eps } => {
                    params.push(Param::new(format!("{i}.gamma"), Tensor::full(&[channels], T::one())?, false));
                    params.push(Param::new(format!("{i}.beta"), Tensor::zeros(&[channels])?, false));
                    stats = Some(RunningStats::new(channels, momentum, eps)?);
                }
                _ => {}
            }
            layers.push(Layer { spec: spec.clone(), params, stats, cache: None });
        }
        Ok(Self { config, layers, rng, need_input_grad: true })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Skip the gradient with respect to the network input (saves the most
    /// expensive transposed convolution when the input is data).
    pub fn set_input_grad(&mut self, enabled: bool) {
        self.need_input_grad = enabled;
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Batch-norm running statistics, named `<layer>.running_mean` / `_var`.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(s) = &l.stats {
                out.push((format!("{i}.running_mean"), &s.mean));
                out.push((format!("{i}.running_var"), &s.var));
            }
        }
        out
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (idx, which) = name.split_once('.')?;
        let stats = self.layers.get_mut(idx.parse::<usize>().ok()?)?.stats.as_mut()?;
        match which {
            "running_mean" => Some(&mut stats.mean),
            "running_var" => Some(&mut stats.var),
            _ => None,
        }
    }

    /// Reseeds the generator behind dropout masks.
    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape() != self.config.input_shape.as_slice() {
            return Err(shape_err!(
                "network input {:?} does not match configured {:?}",
                x.shape(),
                self.config.input_shape
            ));
        }
        Ok(())
    }

    /// Single-sample forward pass returning the logits.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_batch(std::slice::from_ref(input), mode)?.pop().unwrap())
    }

    /// Forward pass over a batch. In training mode every layer keeps what its
    /// backward pass needs and batch norm uses (and updates) batch statistics.
    pub fn forward_batch(&mut self, inputs: &[Tensor<T>], mode: Mode) -> Result<Vec<Tensor<T>>> {
        if mode == Mode::Eval {
            for l in &mut self.layers {
                l.cache = None;
            }
            return self.infer(inputs);
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let Network { layers, rng, .. } = self;
        let mut acts = inputs.to_vec();
        for (i, layer) in layers.iter_mut().enumerate() {
            let (out, cache) = layer_train_forward(layer, acts, rng)
                .map_err(|e| annotate(e, i, &layer.spec))?;
            layer.cache = Some(cache);
            acts = out;
        }
        Ok(acts)
    }

    /// Eval-mode forward pass; leaves the network untouched.
    pub fn infer(&self, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        for x in inputs {
            self.check_input(x)?;
        }
        inputs
            .par_iter()
            .map(|x| {
                let mut a = x.clone();
                for (i, layer) in self.layers.iter().enumerate() {
                    a = layer_eval_forward(layer, &a).map_err(|e| annotate(e, i, &layer.spec))?;
                }
                Ok(a)
            })
            .collect()
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.backward_batch(std::slice::from_ref(upstream))?.pop().unwrap())
    }

    /// Accumulates parameter gradients for the last training pass and returns
    /// the gradient with respect to each input (zeros when input gradients are
    /// disabled).
    pub fn backward_batch(&mut self, upstream: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let need_input_grad = self.need_input_grad;
        let mut grads = upstream.to_vec();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let need = need_input_grad || i > 0;
            grads = layer_backward(layer, grads, need).map_err(|e| annotate(e, i, &layer.spec))?;
        }
        Ok(grads)
    }
}

fn annotate(e: Error, index: usize, spec: &LayerSpec) -> Error {
    match e {
        Error::Shape(m) => shape_err!("layer {index} ({}): {m}", spec.kind()),
        Error::State(m) => Error::State(format!("layer {index} ({}): {m}", spec.kind())),
        other => other,
    }
}

fn layer_eval_forward<T: Real>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let p = &layer.params;
    match &layer.spec {
        LayerSpec::Conv2d { stride, pad, .. } => conv::conv2d(x, &p[0].value, &p[1].value, *stride, *pad),
        LayerSpec::Conv3d { stride, pad, .. } => conv::conv3d(x, &p[0].value, &p[1].value, *stride, *pad),
        LayerSpec::MaxPool3d { window } => Ok(pool::maxpool3d(x, *window)?.output),
        LayerSpec::Relu => Ok(activation::relu(x)),
        LayerSpec::FullyConnected { .. } => dense::fully_connected(x, &p[0].value, &p[1].value),
        LayerSpec::Softmax => Ok(activation::softmax(x)),
        LayerSpec::Dropout { .. } => Ok(x.clone()),
        LayerSpec::BatchNorm { .. } => {
            norm::batch_norm_eval(x, &p[0].value, &p[1].value, layer.stats.as_ref().unwrap())
        }
    }
}

fn layer_train_forward<T: Real>(
    layer: &mut Layer<T>,
    xs: Vec<Tensor<T>>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor<T>>, Cache<T>)> {
    let p = &layer.params;
    match &layer.spec {
        LayerSpec::Conv2d { stride, pad, .. } => {
            let out = per_sample(&xs, |x| conv::conv2d(x, &p[0].value, &p[1].value, *stride, *pad))?;
            Ok((out, Cache::Inputs(xs)))
        }
        LayerSpec::Conv3d { stride, pad, .. } => {
            let out = per_sample(&xs, |x| conv::conv3d(x, &p[0].value, &p[1].value, *stride, *pad))?;
            Ok((out, Cache::Inputs(xs)))
        }
        LayerSpec::MaxPool3d { window } => {
            let pooled: Vec<pool::Pooled<T>> =
                xs.par_iter().map(|x| pool::maxpool3d(x, *window)).collect::<Result<_>>()?;
            let shape = xs[0].shape().to_vec();
            let (out, argmax) = pooled.into_iter().map(|p| (p.output, p.argmax)).unzip();
            Ok((out, Cache::Pool { shape, argmax }))
        }
        LayerSpec::Relu => {
            let out = xs.iter().map(activation::relu).collect();
            Ok((out, Cache::Inputs(xs)))
        }
        LayerSpec::FullyConnected { .. } => {
            let out = per_sample(&xs, |x| dense::fully_connected(x, &p[0].value, &p[1].value))?;
            Ok((out, Cache::Inputs(xs)))
        }
        LayerSpec::Softmax => {
            let out: Vec<Tensor<T>> = xs.iter().map(activation::softmax).collect();
            Ok((out.clone(), Cache::Outputs(out)))
        }
        LayerSpec::Dropout { keep } => {
            let masks = xs
                .iter()
                .map(|x| norm::dropout_mask(x.shape(), *keep, rng))
                .collect::<Result<Vec<_>>>()?;
            let out = xs.iter().zip(&masks).map(|(x, m)| norm::apply_mask(x, m)).collect::<Result<_>>()?;
            Ok((out, Cache::Masks(masks)))
        }
        LayerSpec::BatchNorm { .. } => {
            let stats = layer.stats.as_mut().unwrap();
            let (out, cache) = norm::batch_norm_train(&xs, &p[0].value, &p[1].value, stats)?;
            Ok((out, Cache::Norm(cache)))
        }
    }
}

fn layer_backward<T: Real>(
    layer: &mut Layer<T>,
    grads: Vec<Tensor<T>>,
    need_input: bool,
) -> Result<Vec<Tensor<T>>> {
    let cache = layer
        .cache
        .take()
        .ok_or_else(|| Error::State("backward called without a preceding training forward pass".into()))?;
    let count = match &cache {
        Cache::Inputs(v) | Cache::Masks(v) | Cache::Outputs(v) => v.len(),
        Cache::Pool { argmax, .. } => argmax.len(),
        Cache::Norm(c) => c.xhat.len(),
    };
    if count != grads.len() {
        return Err(shape_err!("{} upstream gradients for a batch of {count}", grads.len()));
    }
    let params = &mut layer.params;
    match (&layer.spec, cache) {
        (LayerSpec::Conv2d { stride, pad, .. }, Cache::Inputs(xs)) => {
            let w = &params[0].value;
            let parts = xs
                .par_iter()
                .zip(grads.par_iter())
                .map(|(x, g)| conv::conv2d_backward(x, w, g, *stride, *pad, need_input))
                .collect::<Result<Vec<_>>>()?;
            Ok(reduce_conv(params, parts, &xs))
        }
        (LayerSpec::Conv3d { stride, pad, .. }, Cache::Inputs(xs)) => {
            let w = &params[0].value;
            let parts = xs
                .par_iter()
                .zip(grads.par_iter())
                .map(|(x, g)| conv::conv3d_backward(x, w, g, *stride, *pad, need_input))
                .collect::<Result<Vec<_>>>()?;
            Ok(reduce_conv(params, parts, &xs))
        }
        (LayerSpec::MaxPool3d { .. }, Cache::Pool { shape, argmax }) => argmax
            .iter()
            .zip(&grads)
            .map(|(a, g)| pool::maxpool3d_backward(&shape, a, g))
            .collect(),
        (LayerSpec::Relu, Cache::Inputs(xs)) => {
            xs.iter().zip(&grads).map(|(x, g)| activation::relu_backward(x, g)).collect()
        }
        (LayerSpec::FullyConnected { .. }, Cache::Inputs(xs)) => {
            let mut out = Vec::with_capacity(xs.len());
            for (x, g) in xs.iter().zip(&grads) {
                let (gx, gw, gb) = dense::fully_connected_backward(x, &params[0].value, g)?;
                params[0].grad.axpy(T::one(), &gw)?;
                params[1].grad.axpy(T::one(), &gb)?;
                out.push(gx);
            }
            Ok(out)
        }
        (LayerSpec::Softmax, Cache::Outputs(ys)) => {
            ys.iter().zip(&grads).map(|(y, g)| activation::softmax_backward(y, g)).collect()
        }
        (LayerSpec::Dropout { .. }, Cache::Masks(ms)) => {
            grads.iter().zip(&ms).map(|(g, m)| norm::apply_mask(g, m)).collect()
        }
        (LayerSpec::BatchNorm { .. }, Cache::Norm(c)) => {
            let (dx, dgamma, dbeta) = norm::batch_norm_backward(&c, &params[0].value, &grads)?;
            params[0].grad.axpy(T::one(), &dgamma)?;
            params[1].grad.axpy(T::one(), &dbeta)?;
            Ok(dx)
        }
        _ => Err(Error::State("cached activations do not belong to this layer".into())),
    }
}

/// Sums per-sample convolution gradients in batch order.
fn reduce_conv<T: Real>(
    params: &mut [Param<T>],
    parts: Vec<conv::ConvGrads<T>>,
    xs: &[Tensor<T>],
) -> Vec<Tensor<T>> {
    let mut out = Vec::with_capacity(parts.len());
    for (part, x) in parts.into_iter().zip(xs) {
        params[0].grad.axpy(T::one(), &part.weights).expect("weight shape");
        params[1].grad.axpy(T::one(), &part.bias).expect("bias shape");
        out.push(part.input.unwrap_or_else(|| x.zeros_like()));
    }
    out
}
