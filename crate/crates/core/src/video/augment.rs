//! Spatial augmentation on the last two axes of frames or volumes. Flow
//! tensors keep u in even and v in odd channels; geometric transforms adjust
//! their values so the vectors stay consistent with the new pixel grid.

use rand::seq::SliceRandom;
use rand::Rng;

use super::Modality;
use crate::error::{param_err, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Augment {
    HFlip,
    /// Flip with probability one half.
    RandomHFlip,
    /// Uniform window of `crop`, resized to `out`.
    RandomCrop { crop: (usize, usize), out: (usize, usize) },
    /// Window of side `scale * min(H,W)` whose width over height is `ratio`
    /// (the longer side keeps the full length), at a uniform position,
    /// resized to `out`.
    ScaleJitterCrop { scales: Vec<f32>, ratios: Vec<f32>, out: (usize, usize) },
    /// Centre window of `crop`, resized to `out`.
    CenterCrop { crop: (usize, usize), out: (usize, usize) },
}

fn dims(t: &Tensor<f32>) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 3 {
        return Err(shape_err!("augmentation needs [C,...,H,W], got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((s[0], h, w))
}

/// Mirrors the width axis; for flow the horizontal component is negated.
pub fn hflip(t: &Tensor<f32>, modality: Modality) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(t)?;
    let planes = t.len() / (h * w);
    let per_channel = planes / c;
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    for p in 0..planes {
        let sign = if modality == Modality::Flow && (p / per_channel).is_multiple_of(2) { -1.0 } else { 1.0 };
        for y in 0..h {
            let row = (p * h + y) * w;
            for x in 0..w {
                dst[row + x] = sign * src[row + w - 1 - x];
            }
        }
    }
    Ok(out)
}

/// Crops `(y, x, ch, cw)` and bilinearly resizes to `out` (half-pixel
/// centres, edges replicated). Flow values are scaled by the zoom factor.
pub fn crop_resize(
    t: &Tensor<f32>,
    modality: Modality,
    window: (usize, usize, usize, usize),
    out: (usize, usize),
) -> Result<Tensor<f32>> {
    let (c, h, w) = dims(t)?;
    let (y0, x0, ch, cw) = window;
    let (oh, ow) = out;
    if ch == 0 || cw == 0 || oh == 0 || ow == 0 {
        return Err(param_err!("empty crop {ch}x{cw} or output {oh}x{ow}"));
    }
    if y0 + ch > h || x0 + cw > w {
        return Err(param_err!("crop {ch}x{cw} at ({y0},{x0}) exceeds frame {h}x{w}"));
    }
    let planes = t.len() / (h * w);
    let per_channel = planes / c;
    let (sy, sx) = (ch as f32 / oh as f32, cw as f32 / ow as f32);
    let taps = |o: usize, s: f32, n: usize| -> (usize, usize, f32) {
        let f = ((o as f32 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f32);
        let i = f.floor() as usize;
        (i, (i + 1).min(n - 1), f - i as f32)
    };
    let ys: Vec<_> = (0..oh).map(|o| taps(o, sy, ch)).collect();
    let xs: Vec<_> = (0..ow).map(|o| taps(o, sx, cw)).collect();
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    let mut data = vec![0.0f32; planes * oh * ow];
    let src = t.data();
    for p in 0..planes {
        let gain = match (modality, (p / per_channel) % 2) {
            (Modality::Flow, 0) => 1.0 / sx,
            (Modality::Flow, _) => 1.0 / sy,
            _ => 1.0,
        };
        let base = p * h * w;
        for (oy, &(y1, y2, fy)) in ys.iter().enumerate() {
            let r1 = base + (y0 + y1) * w + x0;
            let r2 = base + (y0 + y2) * w + x0;
            for (ox, &(x1, x2, fx)) in xs.iter().enumerate() {
                let top = src[r1 + x1] + fx * (src[r1 + x2] - src[r1 + x1]);
                let bot = src[r2 + x1] + fx * (src[r2 + x2] - src[r2 + x1]);
                data[(p * oh + oy) * ow + ox] = gain * (top + fy * (bot - top));
            }
        }
    }
    Tensor::from_vec(&shape, data)
}

/// Picks the crop window for one op given frame size `(h, w)`.
fn window<R: Rng>(op: &Augment, h: usize, w: usize, rng: &mut R) -> Result<Option<((usize, usize, usize, usize), (usize, usize))>> {
    let place = |ch: usize, cw: usize, rng: &mut R| -> Result<(usize, usize)> {
        if ch > h || cw > w || ch == 0 || cw == 0 {
            return Err(param_err!("crop {ch}x{cw} larger than frame {h}x{w}"));
        }
        Ok((rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw)))
    };
    Ok(match op {
        Augment::HFlip | Augment::RandomHFlip => None,
        Augment::RandomCrop { crop: (ch, cw), out } => {
            let (y, x) = place(*ch, *cw, rng)?;
            Some(((y, x, *ch, *cw), *out))
        }
        Augment::CenterCrop { crop: (ch, cw), out } => {
            if *ch > h || *cw > w {
                return Err(param_err!("crop {ch}x{cw} larger than frame {h}x{w}"));
            }
            Some((((h - ch) / 2, (w - cw) / 2, *ch, *cw), *out))
        }
        Augment::ScaleJitterCrop { scales, ratios, out } => {
            let s = *scales.choose(rng).ok_or_else(|| param_err!("no jitter scales"))?;
            let r = *ratios.choose(rng).ok_or_else(|| param_err!("no jitter aspect ratios"))?;
            if !(s > 0.0 && r > 0.0) {
                return Err(param_err!("jitter scale {s} and ratio {r} must be positive"));
            }
            let side = s * h.min(w) as f32;
            let ch = (side * r.recip().min(1.0)).round() as usize;
            let cw = (side * r.min(1.0)).round() as usize;
            let (y, x) = place(ch, cw, rng)?;
            Some(((y, x, ch, cw), *out))
        }
    })
}

/// Applies `ops` in order with one random draw per op shared by all frames,
/// so a clip is transformed consistently.
pub fn augment_frames<R: Rng>(
    frames: &[Tensor<f32>],
    modality: Modality,
    ops: &[Augment],
    rng: &mut R,
) -> Result<Vec<Tensor<f32>>> {
    let mut cur = frames.to_vec();
    for op in ops {
        let Some(first) = cur.first() else { break };
        let (_, h, w) = dims(first)?;
        let flip = match op {
            Augment::HFlip => true,
            Augment::RandomHFlip => rng.gen_bool(0.5),
            _ => false,
        };
        if flip {
            cur = cur.iter().map(|f| hflip(f, modality)).collect::<Result<_>>()?;
        } else if let Some((win, out)) = window(op, h, w, rng)? {
            cur = cur.iter().map(|f| crop_resize(f, modality, win, out)).collect::<Result<_>>()?;
        }
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn flow_flip_negates_u_only() {
        let f = Tensor::from_vec(&[2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = hflip(&f, Modality::Flow).unwrap();
        assert_eq!(g.data(), &[-3.0, -2.0, -1.0, 6.0, 5.0, 4.0]);
        let stacked = ramp(&[4, 2, 2]);
        let g = hflip(&stacked, Modality::Flow).unwrap();
        assert_eq!(g.get(&[2, 0, 0]), -stacked.get(&[2, 0, 1]));
        assert_eq!(g.get(&[3, 0, 0]), stacked.get(&[3, 0, 1]));
    }

    #[test]
    fn constant_image_stays_constant_under_crop() {
        let f = Tensor::full(&[3, 10, 12], 0.42f32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ops = [Augment::RandomCrop { crop: (6, 7), out: (8, 8) }];
        let out = augment_frames(&[f], Modality::Rgb, &ops, &mut rng).unwrap();
        assert_eq!(out[0].shape(), &[3, 8, 8]);
        assert!(out[0].data().iter().all(|&v| (v - 0.42).abs() < 1e-6));
    }

    #[test]
    fn same_size_crop_is_a_copy() {
        let f = ramp(&[1, 5, 6]);
        let g = crop_resize(&f, Modality::Depth, (1, 2, 3, 3), (3, 3)).unwrap();
        assert_eq!(g.get(&[0, 0, 0]), f.get(&[0, 1, 2]));
        assert_eq!(g.get(&[0, 2, 2]), f.get(&[0, 3, 4]));
    }

    #[test]
    fn oversize_crop_is_a_parameter_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = ramp(&[1, 4, 4]);
        let big = [Augment::RandomCrop { crop: (5, 4), out: (4, 4) }];
        assert!(matches!(
            augment_frames(std::slice::from_ref(&f), Modality::Depth, &big, &mut rng),
            Err(crate::Error::Param(_))
        ));
        let jitter = [Augment::ScaleJitterCrop { scales: vec![1.2], ratios: vec![1.0], out: (4, 4) }];
        assert!(augment_frames(&[f], Modality::Depth, &jitter, &mut rng).is_err());
    }

    #[test]
    fn flow_is_rescaled_with_the_zoom() {
        let f = Tensor::full(&[2, 4, 4], 1.0f32).unwrap();
        let g = crop_resize(&f, Modality::Flow, (0, 0, 2, 4), (4, 8)).unwrap();
        assert!((g.get(&[0, 0, 0]) - 2.0).abs() < 1e-6);
        assert!((g.get(&[1, 0, 0]) - 2.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn hflip_is_an_involution(c in 1usize..4, t in 1usize..3, h in 1usize..6, w in 1usize..6, flow in any::<bool>()) {
            let m = if flow { Modality::Flow } else { Modality::Rgb };
            let f = ramp(&[c, t, h, w]);
            let back = hflip(&hflip(&f, m).unwrap(), m).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn augmentation_keeps_count_and_channels(seed in any::<u64>(), n in 1usize..4, c in 1usize..4) {
            let frames: Vec<_> = (0..n).map(|_| ramp(&[c, 12, 10])).collect();
            let ops = [
                Augment::ScaleJitterCrop { scales: vec![1.0, 0.875, 0.75], ratios: vec![0.8, 1.0, 1.25], out: (8, 8) },
                Augment::RandomHFlip,
            ];
            let a = augment_frames(&frames, Modality::Rgb, &ops, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = augment_frames(&frames, Modality::Rgb, &ops, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(a.len(), n);
            prop_assert!(a.iter().all(|f| f.shape() == [c, 8, 8]));
            prop_assert_eq!(a, b);
        }
    }
}
