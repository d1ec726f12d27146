//! Layer kernels (forward and backward) and the sequential network that
//! strings them together.

pub mod activation;
pub mod conv;
pub mod dense;
mod network;
pub mod norm;
pub mod pool;

pub use activation::{log_sum_exp, relu, relu_backward, softmax, softmax_backward, softmax_slice};
pub use conv::{conv2d, conv2d_backward, conv3d, conv3d_backward, ConvGrads};
pub use dense::{fully_connected, fully_connected_backward};
pub use network::{Network, NetworkConfig, Param, StreamOptions};
pub use norm::{
    apply_mask, batch_norm_backward, batch_norm_eval, batch_norm_train, dropout, dropout_mask,
    BatchNormCache, RunningStats,
};
pub use pool::{maxpool3d, maxpool3d_backward, pool_output_shape, Pooled};

use crate::error::{param_err, shape_err, Result};

/// Whether a pass is part of training (dropout active, batch statistics,
/// activations retained) or inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One layer of a [`NetworkConfig`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        pad: [usize; 2],
    },
    Conv3d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    },
    /// Non-overlapping max pool over (t, y, x); `[C,H,W]` inputs need `t == 1`.
    MaxPool3d { window: [usize; 3] },
    Relu,
    /// Flattens its input.
    FullyConnected { in_features: usize, out_features: usize },
    Softmax,
    Dropout { keep: f64 },
    BatchNorm { channels: usize, momentum: f64, eps: f64 },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::MaxPool3d { .. } => "maxpool3d",
            LayerSpec::Relu => "relu",
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::BatchNorm { .. } => "batch_norm",
        }
    }

    /// 3x3 convolution with unit stride and "same" padding.
    pub fn conv2d_same(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv2d { in_channels, out_channels, kernel: [3, 3], stride: [1, 1], pad: [1, 1] }
    }

    /// 3x3x3 convolution with unit stride and "same" padding.
    pub fn conv3d_same(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec::Conv3d {
            in_channels,
            out_channels,
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            pad: [1, 1, 1],
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm { channels, momentum: 0.9, eps: 1e-5 }
    }

    fn check_params(&self) -> Result<()> {
        let positive = |v: &[usize], what: &str| {
            if v.contains(&0) {
                Err(param_err!("{} {what} {v:?} must be >= 1", self.kind()))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, .. } => {
                positive(&[*in_channels, *out_channels], "channels")?;
                positive(kernel, "kernel")?;
                positive(stride, "stride")
            }
            LayerSpec::Conv3d { in_channels, out_channels, kernel, stride, .. } => {
                positive(&[*in_channels, *out_channels], "channels")?;
                positive(kernel, "kernel")?;
                positive(stride, "stride")
            }
            LayerSpec::MaxPool3d { window } => positive(window, "window"),
            LayerSpec::FullyConnected { in_features, out_features } => {
                positive(&[*in_features, *out_features], "features")
            }
            LayerSpec::Dropout { keep } if !(*keep > 0.0 && *keep <= 1.0) => {
                Err(param_err!("dropout keep probability {keep} outside (0, 1]"))
            }
            LayerSpec::BatchNorm { eps, momentum, .. } if *eps <= 0.0 || !(0.0..1.0).contains(momentum) => {
                Err(param_err!("batch norm needs eps > 0 and momentum in [0, 1)"))
            }
            _ => Ok(()),
        }
    }

    /// Shape produced by this layer for a per-sample input of `input` shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check_params()?;
        match self {
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, pad } => {
                let [c, h, w] = match *input {
                    [c, h, w] => [c, h, w],
                    _ => return Err(shape_err!("expected [C,H,W], got {input:?}")),
                };
                if c != *in_channels {
                    return Err(shape_err!("expected {in_channels} input channels, got {c}"));
                }
                let geom = conv::ConvGeometry {
                    kernel: [1, kernel[0], kernel[1]],
                    stride: [1, stride[0], stride[1]],
                    pad: [0, pad[0], pad[1]],
                };
                let [_, ho, wo] = geom.output_dims([1, h, w])?;
                Ok(vec![*out_channels, ho, wo])
            }
            LayerSpec::Conv3d { in_channels, out_channels, kernel, stride, pad } => {
                let [c, t, h, w] = match *input {
                    [c, t, h, w] => [c, t, h, w],
                    _ => return Err(shape_err!("expected [C,T,H,W], got {input:?}")),
                };
                if c != *in_channels {
                    return Err(shape_err!("expected {in_channels} input channels, got {c}"));
                }
                let geom = conv::ConvGeometry { kernel: *kernel, stride: *stride, pad: *pad };
                let [to, ho, wo] = geom.output_dims([t, h, w])?;
                Ok(vec![*out_channels, to, ho, wo])
            }
            LayerSpec::MaxPool3d { window } => pool_output_shape(input, *window),
            LayerSpec::FullyConnected { in_features, out_features } => {
                let n: usize = input.iter().product();
                if n != *in_features {
                    return Err(shape_err!("expected {in_features} features, got {input:?}"));
                }
                Ok(vec![*out_features])
            }
            LayerSpec::BatchNorm { channels, .. } => {
                if input.first() != Some(channels) {
                    return Err(shape_err!("expected {channels} channels, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu | LayerSpec::Softmax | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        }
    }
}
