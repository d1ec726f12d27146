//! 2D and 3D cross-correlation via im2col + GEMM.
//!
//! A 2D convolution is the 3D kernel with a singleton temporal axis.

use crate::error::{shape_err, Result};
use crate::tensor::{matmul, Real, Tensor};

/// Kernel extent, stride and zero padding along (t, y, x).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.pad[axis];
            let (k, s) = (self.kernel[axis], self.stride[axis]);
            if k == 0 || s == 0 {
                return Err(shape_err!("kernel and stride must be >= 1, got {:?}", self));
            }
            if k > padded {
                return Err(shape_err!(
                    "kernel {k} exceeds padded extent {padded} on axis {axis}"
                ));
            }
            if !(padded - k).is_multiple_of(s) {
                return Err(shape_err!(
                    "non-integral output size on axis {axis}: ({padded} - {k}) / {s}"
                ));
            }
            out[axis] = (padded - k) / s + 1;
        }
        Ok(out)
    }

    fn volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Gradients of a convolution with respect to its three operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [c, t, h, w] => Ok([c, t, h, w]),
        _ => Err(shape_err!("expected [C,T,H,W] input, got {shape:?}")),
    }
}

fn check_weights(
    input: [usize; 4],
    weights: &[usize],
    bias: usize,
    geom: &ConvGeometry,
) -> Result<usize> {
    let k = match *weights {
        [k, c, kt, kh, kw] if c == input[0] && [kt, kh, kw] == geom.kernel => k,
        _ => {
            return Err(shape_err!(
                "weights {weights:?} incompatible with input channels {} and kernel {:?}",
                input[0],
                geom.kernel
            ))
        }
    };
    if bias != k {
        return Err(shape_err!("bias length {bias} != output channels {k}"));
    }
    Ok(k)
}

/// Unfolds the input into a `[C*kt*kh*kw, To*Ho*Wo]` patch matrix.
fn im2col<T: Real>(
    input: &[T],
    [c_in, t_in, h_in, w_in]: [usize; 4],
    geom: &ConvGeometry,
    [to, ho, wo]: [usize; 3],
    cols: &mut [T],
) {
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.pad;
    let p = to * ho * wo;
    let mut row = 0;
    for c in 0..c_in {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    row += 1;
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        for oy in 0..ho {
                            let base = (ot * ho + oy) * wo;
                            let out_row = &mut dst[base..base + wo];
                            let iy = (oy * sh + dy) as isize - ph as isize;
                            if it < 0 || it >= t_in as isize || iy < 0 || iy >= h_in as isize {
                                out_row.fill(T::zero());
                                continue;
                            }
                            let src_off = ((c * t_in + it as usize) * h_in + iy as usize) * w_in;
                            let src = &input[src_off..src_off + w_in];
                            if sw == 1 {
                                // valid ox satisfy 0 <= ox + dx - pw < w_in
                                let lo = pw.saturating_sub(dx).min(wo);
                                let hi = (w_in + pw).saturating_sub(dx).min(wo).max(lo);
                                out_row[..lo].fill(T::zero());
                                out_row[hi..].fill(T::zero());
                                if hi > lo {
                                    let s0 = lo + dx - pw;
                                    out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                                }
                            } else {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    let ix = (ox * sw + dx) as isize - pw as isize;
                                    *o = if ix < 0 || ix >= w_in as isize {
                                        T::zero()
                                    } else {
                                        src[ix as usize]
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patch gradients into the input.
fn col2im<T: Real>(
    cols: &[T],
    [c_in, t_in, h_in, w_in]: [usize; 4],
    geom: &ConvGeometry,
    [to, ho, wo]: [usize; 3],
    grad: &mut [T],
) {
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.pad;
    let p = to * ho * wo;
    let mut row = 0;
    for c in 0..c_in {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    row += 1;
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t_in as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * sh + dy) as isize - ph as isize;
                            if iy < 0 || iy >= h_in as isize {
                                continue;
                            }
                            let base = (ot * ho + oy) * wo;
                            let col_row = &src[base..base + wo];
                            let dst_off = ((c * t_in + it as usize) * h_in + iy as usize) * w_in;
                            let dst = &mut grad[dst_off..dst_off + w_in];
                            for (ox, &g) in col_row.iter().enumerate() {
                                let ix = (ox * sw + dx) as isize - pw as isize;
                                if ix >= 0 && ix < w_in as isize {
                                    dst[ix as usize] = dst[ix as usize] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3D cross-correlation of `input [C,T,H,W]` with `weights [K,C,kt,kh,kw]`.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let in_dims = dims4(input.shape())?;
    let kernel = match *weights.shape() {
        [_, _, kt, kh, kw] => [kt, kh, kw],
        _ => return Err(shape_err!("expected [K,C,kt,kh,kw] weights, got {:?}", weights.shape())),
    };
    let geom = ConvGeometry { kernel, stride, pad };
    let k = check_weights(in_dims, weights.shape(), bias.len(), &geom)?;
    let out_dims = geom.output_dims([in_dims[1], in_dims[2], in_dims[3]])?;
    let p: usize = out_dims.iter().product();
    let rows = in_dims[0] * geom.volume();

    let mut cols = vec![T::zero(); rows * p];
    im2col(input.data(), in_dims, &geom, out_dims, &mut cols);
    let mut out = Vec::with_capacity(k * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    matmul(k, rows, p, weights.data(), false, &cols, false, &mut out, true);
    Tensor::from_vec(&[k, out_dims[0], out_dims[1], out_dims[2]], out)
}

/// Gradients of [`conv3d`] given the upstream gradient of its output.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: [usize; 3],
    pad: [usize; 3],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let in_dims = dims4(input.shape())?;
    let kernel = match *weights.shape() {
        [_, _, kt, kh, kw] => [kt, kh, kw],
        _ => return Err(shape_err!("expected [K,C,kt,kh,kw] weights, got {:?}", weights.shape())),
    };
    let geom = ConvGeometry { kernel, stride, pad };
    let k = weights.shape()[0];
    check_weights(in_dims, weights.shape(), k, &geom)?;
    let out_dims = geom.output_dims([in_dims[1], in_dims[2], in_dims[3]])?;
    let expected = [k, out_dims[0], out_dims[1], out_dims[2]];
    if grad_out.shape() != expected {
        return Err(shape_err!(
            "upstream gradient {:?} does not match output {expected:?}",
            grad_out.shape()
        ));
    }
    let p: usize = out_dims.iter().product();
    let rows = in_dims[0] * geom.volume();

    let mut cols = vec![T::zero(); rows * p];
    im2col(input.data(), in_dims, &geom, out_dims, &mut cols);

    let mut gw = vec![T::zero(); k * rows];
    matmul(k, p, rows, grad_out.data(), false, &cols, true, &mut gw, false);
    let gb: Vec<T> = grad_out.data().chunks(p).map(|ch| ch.iter().copied().sum()).collect();

    let gin = if need_input {
        // reuse the patch buffer for W^T * dY
        matmul(rows, k, p, weights.data(), true, grad_out.data(), false, &mut cols, false);
        let mut gin = vec![T::zero(); input.len()];
        col2im(&cols, in_dims, &geom, out_dims, &mut gin);
        Some(Tensor::from_vec(input.shape(), gin)?)
    } else {
        None
    };
    Ok(ConvGrads {
        input: gin,
        weights: Tensor::from_vec(weights.shape(), gw)?,
        bias: Tensor::from_vec(&[k], gb)?,
    })
}

fn lift_2d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let x = match *input.shape() {
        [c, h, w] => input.clone().reshape(&[c, 1, h, w])?,
        _ => return Err(shape_err!("expected [C,H,W] input, got {:?}", input.shape())),
    };
    let wt = match *weights.shape() {
        [k, c, kh, kw] => weights.clone().reshape(&[k, c, 1, kh, kw])?,
        _ => return Err(shape_err!("expected [K,C,kh,kw] weights, got {:?}", weights.shape())),
    };
    Ok((x, wt))
}

/// 2D cross-correlation of `input [C,H,W]` with `weights [K,C,kh,kw]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: [usize; 2],
    pad: [usize; 2],
) -> Result<Tensor<T>> {
    let (x, w) = lift_2d(input, weights)?;
    let y = conv3d(&x, &w, bias, [1, stride[0], stride[1]], [0, pad[0], pad[1]])?;
    let s = y.shape().to_vec();
    y.reshape(&[s[0], s[2], s[3]])
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: [usize; 2],
    pad: [usize; 2],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (x, w) = lift_2d(input, weights)?;
    let g = match *grad_out.shape() {
        [k, h, wd] => grad_out.clone().reshape(&[k, 1, h, wd])?,
        _ => return Err(shape_err!("expected [K,H,W] gradient, got {:?}", grad_out.shape())),
    };
    let grads = conv3d_backward(&x, &w, &g, [1, stride[0], stride[1]], [0, pad[0], pad[1]], need_input)?;
    Ok(ConvGrads {
        input: grads.input.map(|t| t.reshape(input.shape())).transpose()?,
        weights: grads.weights.reshape(weights.shape())?,
        bias: grads.bias,
    })
}
