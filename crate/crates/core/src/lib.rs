//! Multi-modal gesture recognition from RGB, optical-flow, depth and saliency
//! video streams.
//!
//! * [`consensus`]: segment-sampled snippets scored by a 2D network and voted
//!   into one video-level score.
//! * [`layers`]: the 2D and 3D convolutional networks behind every stream.
//! * [`fusion`]: weighted late fusion of per-stream scores.
//! * [`video`] and [`flow`]: dataset I/O, temporal resampling, volume
//!   construction, augmentation, synthetic data and Horn-Schunck flow.

pub mod config;
pub mod consensus;
pub mod error;
pub mod eval;
pub mod flow;
pub mod fusion;
pub mod layers;
pub mod optim;
pub mod tensor;
pub mod video;

pub use error::{Error, Result};
pub use layers::{LayerSpec, Mode, Network, NetworkConfig};
pub use tensor::{Real, Tensor};
