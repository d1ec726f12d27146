//! Dense optical flow (Horn-Schunck) and stacked-flow inputs for the
//! temporal stream.

use rayon::prelude::*;

use crate::error::{param_err, shape_err, Result};
use crate::tensor::Tensor;
use crate::video::{FrameSequence, Modality};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HsParams {
    /// Smoothness weight; the regulariser is scaled by `alpha^2`.
    pub alpha: f32,
    pub iterations: usize,
}

impl Default for HsParams {
    fn default() -> Self {
        Self { alpha: 1.0, iterations: 200 }
    }
}

/// Horizontal (`u`) and vertical (`v`) displacement in pixels per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Tensor<f32>,
    pub v: Tensor<f32>,
}

impl FlowField {
    /// `[2,H,W]` with u first.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = (self.u.shape()[0], self.u.shape()[1]);
        let mut d = self.u.data().to_vec();
        d.extend_from_slice(self.v.data());
        Tensor::from_vec(&[2, h, w], d).expect("u and v share a shape")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match *t.shape() {
            [2, h, w] => {
                let n = h * w;
                Ok(Self {
                    u: Tensor::from_vec(&[h, w], t.data()[..n].to_vec())?,
                    v: Tensor::from_vec(&[h, w], t.data()[n..].to_vec())?,
                })
            }
            ref s => Err(shape_err!("flow tensors are [2,H,W], got {s:?}")),
        }
    }
}

/// Rec. 601 luminance of a `[3,H,W]` frame; `[1,H,W]` and `[H,W]` inputs
/// pass through. Returns `(h, w, pixels)`.
pub fn luminance(frame: &Tensor<f32>) -> Result<(usize, usize, Vec<f32>)> {
    match *frame.shape() {
        [h, w] | [1, h, w] => Ok((h, w, frame.data().to_vec())),
        [3, h, w] => {
            let n = h * w;
            let d = frame.data();
            Ok((h, w, (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect()))
        }
        ref s => Err(shape_err!("flow needs [H,W], [1,H,W] or [3,H,W] frames, got {s:?}")),
    }
}

/// Flow carrying `frame_a` onto `frame_b`.
pub fn compute_flow(frame_a: &Tensor<f32>, frame_b: &Tensor<f32>, params: &HsParams) -> Result<FlowField> {
    let (h, w, a) = luminance(frame_a)?;
    let (hb, wb, b) = luminance(frame_b)?;
    if (h, w) != (hb, wb) {
        return Err(shape_err!("flow frames differ in size: {h}x{w} vs {hb}x{wb}"));
    }
    if !(params.alpha > 0.0) {
        return Err(param_err!("smoothness weight must be positive, got {}", params.alpha));
    }
    let at = |img: &[f32], y: usize, x: usize| img[y * w + x];
    let (mut ix, mut iy, mut it) = (vec![0.0f32; h * w], vec![0.0f32; h * w], vec![0.0f32; h * w]);
    for y in 0..h {
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let i = y * w + x;
            let dx = |img: &[f32]| (at(img, y, xr) - at(img, y, xl)) * 0.5;
            let dy = |img: &[f32]| (at(img, yd, x) - at(img, yu, x)) * 0.5;
            ix[i] = 0.5 * (dx(&a) + dx(&b));
            iy[i] = 0.5 * (dy(&a) + dy(&b));
            it[i] = b[i] - a[i];
        }
    }
    let a2 = params.alpha * params.alpha;
    let denom: Vec<f32> = ix.iter().zip(&iy).map(|(gx, gy)| 1.0 / (a2 + gx * gx + gy * gy)).collect();
    let (mut u, mut v) = (vec![0.0f32; h * w], vec![0.0f32; h * w]);
    let (mut nu, mut nv) = (u.clone(), v.clone());
    for _ in 0..params.iterations {
        for y in 0..h {
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let i = y * w + x;
                let avg = |f: &[f32]| 0.25 * ((f[y * w + xl] + f[y * w + xr]) + (f[yu * w + x] + f[yd * w + x]));
                let (ub, vb) = (avg(&u), avg(&v));
                let r = (ix[i] * ub + iy[i] * vb + it[i]) * denom[i];
                nu[i] = ub - ix[i] * r;
                nv[i] = vb - iy[i] * r;
            }
        }
        std::mem::swap(&mut u, &mut nu);
        std::mem::swap(&mut v, &mut nv);
    }
    Ok(FlowField { u: Tensor::from_vec(&[h, w], u)?, v: Tensor::from_vec(&[h, w], v)? })
}

/// One field per frame of `seq`: field `t` carries frame `t` onto `t + 1`,
/// and the last field repeats its predecessor so the flow timeline matches
/// the frame timeline.
pub fn compute_sequence_flow(seq: &FrameSequence, params: &HsParams) -> Result<FrameSequence> {
    if seq.len() < 2 {
        return Err(param_err!("flow needs at least 2 frames, got {}", seq.len()));
    }
    let mut fields = (0..seq.len() - 1)
        .into_par_iter()
        .map(|t| compute_flow(&seq.frames[t], &seq.frames[t + 1], params).map(|f| f.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    fields.push(fields[fields.len() - 1].clone());
    FrameSequence::new(Modality::Flow, fields)
}

/// `[2L,H,W]` stack `u_t, v_t, ..., u_{t+L-1}, v_{t+L-1}` of a flow sequence,
/// field indices clamped to the last field, each plane made zero-mean.
pub fn stack_flow(fields: &FrameSequence, l: usize, anchor: usize) -> Result<Tensor<f32>> {
    if l < 1 {
        return Err(param_err!("flow stack depth must be at least 1"));
    }
    if fields.modality != Modality::Flow {
        return Err(param_err!("stack_flow needs a flow sequence, got {}", fields.modality));
    }
    if anchor >= fields.len() {
        return Err(param_err!("flow anchor {anchor} outside [0, {})", fields.len()));
    }
    let (h, w) = fields.frame_size();
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * l * plane);
    for i in 0..l {
        let f = &fields.frames[(anchor + i).min(fields.len() - 1)];
        for p in f.data().chunks_exact(plane) {
            let mean = p.iter().map(|&x| x as f64).sum::<f64>() / plane as f64;
            data.extend(p.iter().map(|&x| (x as f64 - mean) as f32));
        }
    }
    Tensor::from_vec(&[2 * l, h, w], data)
}
