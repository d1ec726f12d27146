//! Synthetic gesture clips: a bright paraboloid blob crossing a textured
//! scene. Class `c` moves in direction `c % 8` (multiples of 45 degrees,
//! starting rightward, clockwise in image coordinates) at speed tier `c / 8`.
//! The trajectory is centred on the frame centre, so single frames near the
//! middle of a clip carry no class information.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{save_sample, DatasetManifest, FrameSequence, Modality, VideoSample};
use crate::error::{param_err, Result};
use crate::tensor::Tensor;

pub const DIRECTION_NAMES: [&str; 8] =
    ["right", "down-right", "down", "down-left", "left", "up-left", "up", "up-right"];
const SPEED_TIERS: [f32; 2] = [1.0, 1.5];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of per-frame rgb pixel noise.
    pub rgb_noise: f32,
    /// Peak-to-peak amplitude of the rgb background texture.
    pub texture: f32,
    /// Adds a second, randomly moving blob to rgb only.
    pub distractor: bool,
    /// Standard deviation of per-frame depth noise.
    pub depth_noise: f32,
}

impl SynthConfig {
    pub fn new(classes: usize, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            classes,
            frames,
            height,
            width,
            seed,
            rgb_noise: 0.03,
            texture: 0.5,
            distractor: false,
            depth_noise: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.classes) {
            return Err(param_err!("synthetic class count {} outside 2..=16", self.classes));
        }
        if self.frames < 8 {
            return Err(param_err!("synthetic clips need at least 8 frames, got {}", self.frames));
        }
        if self.height < 8 || self.width < 8 {
            return Err(param_err!("synthetic frames must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if !(self.rgb_noise >= 0.0 && self.depth_noise >= 0.0 && self.texture >= 0.0) {
            return Err(param_err!("noise and texture levels must be non-negative"));
        }
        Ok(())
    }

    /// Per-frame displacement of class `label`, in pixels `(dx, dy)`.
    pub fn velocity(&self, label: usize) -> (f32, f32) {
        let theta = (label % 8) as f32 * PI / 4.0;
        let speed = 0.5 * self.height.min(self.width) as f32 / self.frames as f32 * SPEED_TIERS[label / 8];
        (speed * theta.cos(), speed * theta.sin())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_seed(seed: u64, split: &str, index: usize) -> u64 {
    let tag = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index as u64)
}

fn quantise(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn gaussian<R: Rng>(rng: &mut R) -> f32 {
    // Box-Muller
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Blob intensity `max(0, 1 - d^2 / r^2)` on an `h x w` grid.
pub fn blob_alpha(h: usize, w: usize, cx: f32, cy: f32, r: f32) -> Vec<f32> {
    let mut a = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            a[y * w + x] = (1.0 - (dx * dx + dy * dy) / (r * r)).max(0.0);
        }
    }
    a
}

struct Grating {
    kx: f32,
    ky: f32,
    phase: f32,
}

/// Renders sample `index` of `split`; the label is `index % classes`.
pub fn generate_sample(cfg: &SynthConfig, split: &str, index: usize) -> Result<VideoSample> {
    cfg.validate()?;
    let (h, w, t) = (cfg.height, cfg.width, cfg.frames);
    let plane = h * w;
    let label = index % cfg.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, split, index));
    let side = h.min(w) as f32;

    let radius = 0.12 * side * rng.gen_range(0.9..1.1);
    let jitter = 0.08 * side;
    let (cx0, cy0) = (
        (w as f32 - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter),
        (h as f32 - 1.0) / 2.0 + rng.gen_range(-jitter..=jitter),
    );
    let (vx, vy) = cfg.velocity(label);
    let colour: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.85..1.0));

    let mut background = vec![0.0f32; 3 * plane];
    for ch in 0..3 {
        let gratings: Vec<Grating> = (0..3)
            .map(|_| {
                let f = rng.gen_range(0.15..0.6);
                let o = rng.gen_range(0.0..2.0 * PI);
                Grating { kx: f * o.cos(), ky: f * o.sin(), phase: rng.gen_range(0.0..2.0 * PI) }
            })
            .collect();
        let mean = rng.gen_range(0.3..0.45);
        for y in 0..h {
            for x in 0..w {
                let s: f32 = gratings.iter().map(|g| (g.kx * x as f32 + g.ky * y as f32 + g.phase).sin()).sum();
                background[ch * plane + y * w + x] = mean + cfg.texture / 6.0 * s;
            }
        }
    }
    let floor: Vec<f32> = (0..plane).map(|i| 0.2 + 0.1 * (i / w) as f32 / h as f32).collect();

    let distractor = cfg.distractor.then(|| {
        let theta = rng.gen_range(0.0..2.0 * PI);
        let speed = rng.gen_range(0.0..1.5) * 0.5 * side / t as f32;
        let start = (rng.gen_range(0.0..w as f32), rng.gen_range(0.0..h as f32));
        let colour: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.6..1.0));
        (start, (speed * theta.cos(), speed * theta.sin()), colour, 0.12 * side * rng.gen_range(0.8..1.2))
    });

    let mid = (t as f32 - 1.0) / 2.0;
    let mut rgb = Vec::with_capacity(t);
    let mut depth = Vec::with_capacity(t);
    let mut saliency = Vec::with_capacity(t);
    for f in 0..t {
        let dt = f as f32 - mid;
        let a = blob_alpha(h, w, cx0 + vx * dt, cy0 + vy * dt, radius);
        let d = distractor.map(|((sx, sy), (dx, dy), col, r)| (blob_alpha(h, w, sx + dx * f as f32, sy + dy * f as f32, r), col));
        let mut img = vec![0.0f32; 3 * plane];
        for ch in 0..3 {
            for i in 0..plane {
                let mut v = background[ch * plane + i];
                if let Some((da, dcol)) = &d {
                    v += da[i] * (dcol[ch] - v);
                }
                v += a[i] * (colour[ch] - v);
                img[ch * plane + i] = v;
            }
        }
        for v in img.iter_mut() {
            *v = quantise(*v + cfg.rgb_noise * gaussian(&mut rng));
        }
        let dep: Vec<f32> = (0..plane)
            .map(|i| {
                let noise = if cfg.depth_noise > 0.0 { cfg.depth_noise * gaussian(&mut rng) } else { 0.0 };
                quantise(floor[i] + 0.5 * a[i] + noise)
            })
            .collect();
        let sal: Vec<f32> = a.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        rgb.push(Tensor::from_vec(&[3, h, w], img)?);
        depth.push(Tensor::from_vec(&[1, h, w], dep)?);
        saliency.push(Tensor::from_vec(&[1, h, w], sal)?);
    }
    VideoSample::new(
        format!("{split}{index:05}"),
        label,
        vec![
            FrameSequence::new(Modality::Rgb, rgb)?,
            FrameSequence::new(Modality::Depth, depth)?,
            FrameSequence::new(Modality::Saliency, saliency)?,
        ],
    )
}

/// `per_class * classes` samples, labels cycling through the classes.
pub fn generate_split(cfg: &SynthConfig, split: &str, per_class: usize) -> Result<Vec<VideoSample>> {
    cfg.validate()?;
    (0..per_class * cfg.classes)
        .into_par_iter()
        .map(|i| generate_sample(cfg, split, i))
        .collect()
}

/// Generates and writes each `(split, per_class)` below `root`.
pub fn write_dataset(cfg: &SynthConfig, root: &Path, splits: &[(&str, usize)]) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let mut manifests = Vec::new();
    for &(split, per_class) in splits {
        let n = per_class * cfg.classes;
        let split_dir = root.join(split);
        let entries = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = generate_sample(cfg, split, i)?;
                save_sample(&split_dir, &s)?;
                Ok((s.id, s.label))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = DatasetManifest::new(root, split, entries, cfg.classes)?;
        m.save()?;
        manifests.push(m);
    }
    Ok(manifests)
}
