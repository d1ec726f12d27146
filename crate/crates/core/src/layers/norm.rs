//! Regularisation layers: inverted dropout and per-channel batch normalisation.

use rand::Rng;

use super::Mode;
use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Draws an inverted-dropout mask: each entry is `1/keep` with probability
/// `keep`, otherwise zero.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    keep: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(param_err!("dropout keep probability {keep} outside (0, 1]"));
    }
    let mut mask = Tensor::zeros(shape)?;
    let scale = T::of(1.0 / keep);
    for m in mask.data_mut() {
        if keep >= 1.0 || rng.gen::<f64>() < keep {
            *m = scale;
        }
    }
    Ok(mask)
}

/// Inverted dropout. Eval mode (or `keep == 1`) is the identity.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    keep: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(param_err!("dropout keep probability {keep} outside (0, 1]"));
    }
    if mode == Mode::Eval || keep >= 1.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask(input.shape(), keep, rng)?;
    apply_mask(input, &mask)
}

/// Elementwise product with a fixed mask; also the dropout backward pass.
pub fn apply_mask<T: Real>(input: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != mask.shape() {
        return Err(shape_err!("dropout mask {:?} vs input {:?}", mask.shape(), input.shape()));
    }
    let data = input.data().iter().zip(mask.data()).map(|(&x, &m)| x * m).collect();
    Tensor::from_vec(input.shape(), data)
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if eps <= 0.0 {
            return Err(param_err!("batch-norm epsilon must be positive, got {eps}"));
        }
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::full(&[channels], T::one())?,
            momentum,
            eps,
        })
    }
}

/// Values saved by a training-mode pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Vec<Tensor<T>>,
    pub inv_std: Vec<T>,
}

fn channel_layout<T: Real>(inputs: &[Tensor<T>], channels: usize) -> Result<usize> {
    let first = inputs.first().ok_or_else(|| param_err!("batch norm over an empty batch"))?;
    if first.shape()[0] != channels {
        return Err(shape_err!(
            "batch norm over {channels} channels given input {:?}",
            first.shape()
        ));
    }
    if let Some(bad) = inputs.iter().find(|x| x.shape() != first.shape()) {
        return Err(shape_err!("ragged batch: {:?} vs {:?}", bad.shape(), first.shape()));
    }
    Ok(first.len() / channels)
}

/// Training-mode batch normalisation: statistics come from the batch (over
/// every sample and spatial position of a channel) and the running estimates
/// are updated in place.
pub fn batch_norm_train<T: Real>(
    inputs: &[Tensor<T>],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
) -> Result<(Vec<Tensor<T>>, BatchNormCache<T>)> {
    if inputs.len() < 2 {
        return Err(param_err!(
            "training-mode batch norm needs a batch of at least 2, got {}",
            inputs.len()
        ));
    }
    let c_n = gamma.len();
    let spatial = channel_layout(inputs, c_n)?;
    let count = T::of((inputs.len() * spatial) as f64);
    let momentum = T::of(stats.momentum);
    let eps = T::of(stats.eps);

    let mut outputs: Vec<Tensor<T>> = inputs.iter().map(Tensor::zeros_like).collect();
    let mut xhat: Vec<Tensor<T>> = outputs.clone();
    let mut inv_std = Vec::with_capacity(c_n);
    for c in 0..c_n {
        let range = c * spatial..(c + 1) * spatial;
        let mean = inputs.iter().map(|x| x.data()[range.clone()].iter().copied().sum::<T>()).sum::<T>()
            / count;
        let var = inputs
            .iter()
            .map(|x| x.data()[range.clone()].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / count;
        let istd = T::one() / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for ((x, y), h) in inputs.iter().zip(outputs.iter_mut()).zip(xhat.iter_mut()) {
            for i in range.clone() {
                let n = (x.data()[i] - mean) * istd;
                h.data_mut()[i] = n;
                y.data_mut()[i] = n * g + b;
            }
        }
        let rm = &mut stats.mean.data_mut()[c];
        *rm = momentum * *rm + (T::one() - momentum) * mean;
        let rv = &mut stats.var.data_mut()[c];
        *rv = momentum * *rv + (T::one() - momentum) * var;
    }
    Ok((outputs, BatchNormCache { xhat, inv_std }))
}

/// Eval-mode batch normalisation using the running statistics.
pub fn batch_norm_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<Tensor<T>> {
    let c_n = gamma.len();
    let spatial = channel_layout(std::slice::from_ref(input), c_n)?;
    let eps = T::of(stats.eps);
    let mut out = input.clone();
    for c in 0..c_n {
        let mean = stats.mean.data()[c];
        let istd = T::one() / (stats.var.data()[c] + eps).sqrt();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for v in &mut out.data_mut()[c * spatial..(c + 1) * spatial] {
            *v = (*v - mean) * istd * g + b;
        }
    }
    Ok(out)
}

/// Returns `(dX per sample, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grads_out: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    if grads_out.len() != cache.xhat.len() {
        return Err(shape_err!(
            "batch norm backward got {} gradients for a batch of {}",
            grads_out.len(),
            cache.xhat.len()
        ));
    }
    let c_n = gamma.len();
    let spatial = channel_layout(grads_out, c_n)?;
    let count = T::of((grads_out.len() * spatial) as f64);
    let mut dgamma = Tensor::zeros(&[c_n])?;
    let mut dbeta = Tensor::zeros(&[c_n])?;
    let mut dx: Vec<Tensor<T>> = grads_out.iter().map(Tensor::zeros_like).collect();
    for c in 0..c_n {
        let range = c * spatial..(c + 1) * spatial;
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (g, h) in grads_out.iter().zip(&cache.xhat) {
            for i in range.clone() {
                sum_g = sum_g + g.data()[i];
                sum_gx = sum_gx + g.data()[i] * h.data()[i];
            }
        }
        dgamma.data_mut()[c] = sum_gx;
        dbeta.data_mut()[c] = sum_g;
        let k = gamma.data()[c] * cache.inv_std[c] / count;
        for ((g, h), d) in grads_out.iter().zip(&cache.xhat).zip(dx.iter_mut()) {
            for i in range.clone() {
                d.data_mut()[i] = k * (count * g.data()[i] - sum_g - h.data()[i] * sum_gx);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
