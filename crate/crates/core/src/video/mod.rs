//! Multi-modal video samples: frame sequences, temporal resampling, volume
//! construction, augmentation, on-disk datasets and synthetic data.

pub mod augment;
pub mod dataset;
pub mod flo;
pub mod netpbm;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub use augment::{augment_frames, hflip, Augment};
pub use dataset::{load_sample, save_sample, DatasetManifest};
pub use synth::{generate_split, write_dataset, SynthConfig};

/// Number of frames every sequence is resampled to before volumes are built.
pub const VOLUME_FRAMES: usize = 32;
/// Frames preceding the centre frame in a volume.
pub const VOLUME_LEAD: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Saliency,
    Flow,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Rgb, Modality::Depth, Modality::Saliency, Modality::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Saliency => "saliency",
            Modality::Flow => "flow",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth | Modality::Saliency => 1,
            Modality::Flow => 2,
        }
    }

    /// File extension of a single frame.
    pub fn extension(self) -> &'static str {
        match self {
            Modality::Rgb => "ppm",
            Modality::Depth | Modality::Saliency => "pgm",
            Modality::Flow => "flo",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| param_err!("unknown modality {s:?} (rgb|depth|saliency|flow)"))
    }
}

/// Frames of one modality, each `[C,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub modality: Modality,
    pub frames: Vec<Tensor<f32>>,
}

impl FrameSequence {
    pub fn new(modality: Modality, frames: Vec<Tensor<f32>>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| param_err!("{modality} sequence has no frames"))?;
        let expect = [modality.channels()];
        if first.ndim() != 3 || first.shape()[..1] != expect {
            return Err(shape_err!("{modality} frames must be [{},H,W], got {:?}", expect[0], first.shape()));
        }
        if let Some(bad) = frames.iter().find(|f| f.shape() != first.shape()) {
            return Err(shape_err!("{modality} frames disagree: {:?} vs {:?}", bad.shape(), first.shape()));
        }
        Ok(Self { modality, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(H, W)` of every frame.
    pub fn frame_size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }
}

/// One labelled clip with any subset of modalities, all of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub label: usize,
    pub modalities: BTreeMap<Modality, FrameSequence>,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, label: usize, sequences: Vec<FrameSequence>) -> Result<Self> {
        let id = id.into();
        let mut modalities = BTreeMap::new();
        let mut len = None;
        for seq in sequences {
            match len {
                None => len = Some(seq.len()),
                Some(n) if n != seq.len() => {
                    return Err(crate::error::format_err!(
                        "sample {id}: {} has {} frames, expected {n}",
                        seq.modality,
                        seq.len()
                    ))
                }
                _ => {}
            }
            modalities.insert(seq.modality, seq);
        }
        if modalities.is_empty() {
            return Err(param_err!("sample {id} has no modalities"));
        }
        Ok(Self { id, label, modalities })
    }

    pub fn frame_count(&self) -> usize {
        self.modalities.values().next().map_or(0, FrameSequence::len)
    }

    pub fn get(&self, m: Modality) -> Result<&FrameSequence> {
        self.modalities
            .get(&m)
            .ok_or_else(|| Error::Config(format!("sample {} lacks the {m} modality", self.id)))
    }

    /// Adds or replaces a modality, enforcing the common length.
    pub fn insert(&mut self, seq: FrameSequence) -> Result<()> {
        let n = self.frame_count();
        if n != 0 && seq.len() != n && !(self.modalities.len() == 1 && self.modalities.contains_key(&seq.modality)) {
            return Err(crate::error::format_err!(
                "sample {}: {} has {} frames, expected {n}",
                self.id,
                seq.modality,
                seq.len()
            ));
        }
        self.modalities.insert(seq.modality, seq);
        Ok(())
    }
}

/// Centre-aligned nearest-neighbour source index of each output frame:
/// `floor((j + 0.5) * t_in / t_out)`.
pub fn resample_indices(t_in: usize, t_out: usize) -> Vec<usize> {
    (0..t_out)
        .map(|j| (((2 * j + 1) * t_in) / (2 * t_out)).min(t_in - 1))
        .collect()
}

/// Resamples to exactly `t_out` frames by dropping or repeating frames.
pub fn resample_to(seq: &FrameSequence, t_out: usize) -> Result<FrameSequence> {
    if seq.is_empty() || t_out == 0 {
        return Err(param_err!("cannot resample {} frames to {t_out}", seq.len()));
    }
    let frames = resample_indices(seq.len(), t_out).into_iter().map(|i| seq.frames[i].clone()).collect();
    Ok(FrameSequence { modality: seq.modality, frames })
}

/// Frame indices `clamp(center - 15 + k, 0, 31)` for `k` in `0..32`.
pub fn volume_indices(center: usize) -> Vec<usize> {
    (0..VOLUME_FRAMES)
        .map(|k| (center + k).saturating_sub(VOLUME_LEAD).min(VOLUME_FRAMES - 1))
        .collect()
}

/// Stacks the 32 frames around `center` into a `[C,32,H,W]` volume, clamping
/// at the sequence ends.
pub fn build_volume(seq: &FrameSequence, center: usize) -> Result<Tensor<f32>> {
    if seq.len() != VOLUME_FRAMES {
        return Err(param_err!("volumes need {VOLUME_FRAMES} frames, got {}", seq.len()));
    }
    if center >= VOLUME_FRAMES {
        return Err(param_err!("volume centre {center} outside [0, {VOLUME_FRAMES})"));
    }
    let (h, w) = seq.frame_size();
    let c = seq.modality.channels();
    let plane = h * w;
    let idx = volume_indices(center);
    let mut data = vec![0.0f32; c * VOLUME_FRAMES * plane];
    for (k, &src) in idx.iter().enumerate() {
        let f = seq.frames[src].data();
        for ch in 0..c {
            let dst = (ch * VOLUME_FRAMES + k) * plane;
            data[dst..dst + plane].copy_from_slice(&f[ch * plane..(ch + 1) * plane]);
        }
    }
    Tensor::from_vec(&[c, VOLUME_FRAMES, h, w], data)
}
