//! Losses and stochastic gradient descent with momentum, weight decay, global
//! norm clipping and a step-decay learning-rate schedule.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{param_err, shape_err, Error, Result};
use crate::layers::{log_sum_exp, softmax_slice, Mode, Network};
use crate::tensor::{argmax, Real, Tensor};

/// Softmax cross-entropy of `logits` against a one-hot `label`.
///
/// Returns the loss `log sum_j exp(p_j) - p_label` and its gradient
/// `softmax(p) - onehot(label)`.
pub fn cross_entropy_loss<T: Real>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let l = logits.len();
    if l < 2 {
        return Err(param_err!("cross entropy needs at least 2 classes, got {l}"));
    }
    if label >= l {
        return Err(param_err!("label {label} out of range for {l} classes"));
    }
    let p = logits.data();
    let loss = log_sum_exp(p) - p[label];
    let mut grad = softmax_slice(p);
    grad[label] = grad[label] - T::one();
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}

/// Floor applied to a true-class probability before taking its log.
pub const NLL_FLOOR: f64 = 1e-12;

/// Mean negative log-likelihood of the true classes over a batch of
/// probability vectors.
pub fn nll_batch_loss<T: Real>(probabilities: &[Tensor<T>], labels: &[usize]) -> Result<T> {
    if probabilities.is_empty() || probabilities.len() != labels.len() {
        return Err(param_err!(
            "nll over {} probability vectors and {} labels",
            probabilities.len(),
            labels.len()
        ));
    }
    let mut total = T::zero();
    for (i, (p, &label)) in probabilities.iter().zip(labels).enumerate() {
        let sum = p.sum().to_f64_lossy();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(param_err!("sample {i}: probabilities sum to {sum}"));
        }
        let q = *p
            .data()
            .get(label)
            .ok_or_else(|| param_err!("sample {i}: label {label} out of range"))?;
        let q = if q.to_f64_lossy() < NLL_FLOOR {
            log::warn!("sample {i}: true-class probability {q} clamped to {NLL_FLOOR}");
            T::of(NLL_FLOOR)
        } else {
            q
        };
        total = total - q.ln();
    }
    Ok(total / T::of(probabilities.len() as f64))
}

/// Global-norm clipping: rescales all gradients by `c / norm` when their joint
/// L2 norm exceeds `c`. Returns the norm before clipping.
pub fn clip_gradient<T: Real>(grads: &mut [&mut Tensor<T>], c: T) -> T {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<T>().sqrt();
    if norm > c {
        let s = c / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// [`clip_gradient`] over every parameter gradient of a network.
pub fn clip_network_gradients<T: Real>(net: &mut Network<T>, c: T) -> T {
    let mut grads: Vec<&mut Tensor<T>> = net.params_mut().map(|p| &mut p.grad).collect();
    clip_gradient(&mut grads, c)
}

/// `lr0 * decay^floor(iteration / interval)`.
pub fn lr_schedule(lr0: f64, decay: f64, interval: u64, iteration: u64) -> f64 {
    lr0 * decay.powi((iteration / interval.max(1)) as i32)
}

/// Hyperparameters of [`Sgd`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold.
    pub clip: f64,
    /// Multiplier applied to the learning rate every `step_interval` iterations.
    pub decay_factor: f64,
    pub step_interval: u64,
}

impl SgdConfig {
    /// Defaults of the RGB and flow 2D streams.
    pub fn stream_2d() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip: 10.0,
            decay_factor: 0.1,
            step_interval: 1500,
        }
    }

    /// Defaults of the depth and saliency 3D streams.
    pub fn stream_3d() -> Self {
        Self { learning_rate: 1e-4, step_interval: 5000, ..Self::stream_2d() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(param_err!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(param_err!("learning rate {} must be non-negative", self.learning_rate));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(param_err!("weight decay {} must be non-negative", self.weight_decay));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(param_err!("clip threshold {} must be positive", self.clip));
        }
        Ok(())
    }
}

/// Optimizer state: one velocity per parameter plus the iteration counter.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub config: SgdConfig,
    velocities: Vec<Tensor<T>>,
    iteration: u64,
    pub(crate) epoch: u64,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, velocities: Vec::new(), iteration: 0, epoch: 0 })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn velocities(&self) -> &[Tensor<T>] {
        &self.velocities
    }

    /// Restores state saved by a checkpoint.
    pub fn restore(&mut self, velocities: Vec<Tensor<T>>, iteration: u64) {
        self.velocities = velocities;
        self.iteration = iteration;
    }

    /// Learning rate in effect for the next step.
    pub fn learning_rate(&self) -> f64 {
        lr_schedule(
            self.config.learning_rate,
            self.config.decay_factor,
            self.config.step_interval,
            self.iteration,
        )
    }

    /// One update from already averaged and clipped gradients:
    /// `v = mu v - lr g` and `theta = theta + v - wd lr theta` (the decay term
    /// only for parameters flagged for it).
    pub fn step(&mut self, net: &mut Network<T>) -> Result<()> {
        let lr = T::of(self.learning_rate());
        let mu = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        let mut params: Vec<_> = net.params_mut().collect();
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| p.value.zeros_like()).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(shape_err!(
                "{} velocities for {} parameters",
                self.velocities.len(),
                params.len()
            ));
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocities) {
            if p.value.shape() != v.shape() || p.grad.shape() != v.shape() {
                return Err(shape_err!(
                    "{}: parameter {:?}, gradient {:?}, velocity {:?}",
                    p.name,
                    p.value.shape(),
                    p.grad.shape(),
                    v.shape()
                ));
            }
            let decay = if p.decay { wd * lr } else { T::zero() };
            for ((theta, &g), vel) in
                p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut())
            {
                *vel = mu * *vel - lr * g;
                *theta = *theta + *vel - decay * *theta;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

/// Per-epoch training summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: u64,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} acc={:.4} lr={}",
            self.epoch, self.mean_loss, self.accuracy, self.lr
        )
    }
}

pub(crate) fn with_batch(e: Error, batch: usize) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("batch {batch}: {m}")),
        Error::Param(m) => Error::Param(format!("batch {batch}: {m}")),
        Error::State(m) => Error::State(format!("batch {batch}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("batch {batch}: {m}")),
        other => other,
    }
}

/// Splits `order` into mini-batches; a trailing batch of one joins the
/// previous batch so batch norm always sees at least two samples.
pub(crate) fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let n = order.len();
    let mut cuts: Vec<usize> = (0..n).step_by(batch_size).collect();
    if batch_size > 1 && cuts.len() > 1 && n - cuts[cuts.len() - 1] == 1 {
        cuts.pop();
    }
    cuts.iter().enumerate().map(|(i, &a)| &order[a..cuts.get(i + 1).copied().unwrap_or(n)]).collect()
}

/// Clips the accumulated gradients and applies one optimizer step.
pub fn apply_update<T: Real>(net: &mut Network<T>, opt: &mut Sgd<T>) -> Result<()> {
    clip_network_gradients(net, T::of(opt.config.clip));
    opt.step(net)
}

/// One pass over `data` in shuffled mini-batches: forward, softmax
/// cross-entropy, backward, batch averaging, clipping and an SGD step.
pub fn train_epoch<T: Real, R: Rng>(
    net: &mut Network<T>,
    data: &[(Tensor<T>, usize)],
    opt: &mut Sgd<T>,
    batch_size: usize,
    rng: &mut R,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(param_err!("training set is empty"));
    }
    if batch_size == 0 {
        return Err(param_err!("batch size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let lr = opt.learning_rate();
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, chunk) in batches(&order, batch_size).into_iter().enumerate() {
        let inputs: Vec<Tensor<T>> = chunk.iter().map(|&i| data[i].0.clone()).collect();
        let logits = net.forward_batch(&inputs, Mode::Train).map_err(|e| with_batch(e, b))?;
        let scale = T::of(1.0 / chunk.len() as f64);
        let mut upstream = Vec::with_capacity(chunk.len());
        for (&i, z) in chunk.iter().zip(&logits) {
            let label = data[i].1;
            let (loss, mut g) = cross_entropy_loss(z, label).map_err(|e| with_batch(e, b))?;
            if !loss.is_finite() {
                return Err(with_batch(Error::Numeric(format!("non-finite loss {loss}")), b));
            }
            loss_sum += loss.to_f64_lossy();
            correct += usize::from(argmax(z.data()) == label);
            g.scale(scale);
            upstream.push(g);
        }
        net.zero_grad();
        net.backward_batch(&upstream).map_err(|e| with_batch(e, b))?;
        apply_update(net, opt).map_err(|e| with_batch(e, b))?;
    }
    opt.epoch += 1;
    Ok(EpochStats {
        epoch: opt.epoch,
        mean_loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        lr,
    })
}
