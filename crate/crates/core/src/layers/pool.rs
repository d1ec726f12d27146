use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Output of [`maxpool3d`]: pooled values plus the flat input offset of each
/// window's maximum, used to route gradients back.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

fn as_4d(shape: &[usize]) -> Result<([usize; 4], bool)> {
    match *shape {
        [c, t, h, w] => Ok(([c, t, h, w], false)),
        [c, h, w] => Ok(([c, 1, h, w], true)),
        _ => Err(shape_err!("max pooling expects [C,T,H,W] or [C,H,W], got {shape:?}")),
    }
}

/// Output shape of a non-overlapping max pool; trailing elements that do not
/// fill a window are dropped.
pub fn pool_output_shape(shape: &[usize], window: [usize; 3]) -> Result<Vec<usize>> {
    let ([c, t, h, w], flat) = as_4d(shape)?;
    if window.contains(&0) {
        return Err(shape_err!("pooling window {window:?} has a zero extent"));
    }
    for (axis, (&n, &k)) in [t, h, w].iter().zip(&window).enumerate() {
        if k > n {
            return Err(shape_err!("pooling window {k} larger than axis {axis} of size {n}"));
        }
    }
    let out = [c, t / window[0], h / window[1], w / window[2]];
    Ok(if flat { vec![out[0], out[2], out[3]] } else { out.to_vec() })
}

/// Max pooling with stride equal to the window over `[C,T,H,W]` (or `[C,H,W]`,
/// treated as a single time step).
pub fn maxpool3d<T: Real>(input: &Tensor<T>, window: [usize; 3]) -> Result<Pooled<T>> {
    let out_shape = pool_output_shape(input.shape(), window)?;
    let ([c_n, t_n, h_n, w_n], _) = as_4d(input.shape())?;
    let [wt, wh, ww] = window;
    let (to, ho, wo) = (t_n / wt, h_n / wh, w_n / ww);
    let x = input.data();
    let mut out = Vec::with_capacity(c_n * to * ho * wo);
    let mut argmax = Vec::with_capacity(out.capacity());
    for c in 0..c_n {
        for ot in 0..to {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for dt in 0..wt {
                        for dy in 0..wh {
                            let row = ((c * t_n + ot * wt + dt) * h_n + oy * wh + dy) * w_n + ox * ww;
                            for (i, &v) in x[row..row + ww].iter().enumerate() {
                                if best_at == usize::MAX || v > best {
                                    best = v;
                                    best_at = row + i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
    }
    Ok(Pooled { output: Tensor::from_vec(&out_shape, out)?, argmax })
}

/// Routes each pooled gradient to the input position that won its window.
pub fn maxpool3d_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(shape_err!(
            "pool gradient has {} elements, expected {}",
            grad_out.len(),
            argmax.len()
        ));
    }
    let mut grad = Tensor::zeros(input_shape)?;
    let g = grad.data_mut();
    for (&at, &v) in argmax.iter().zip(grad_out.data()) {
        g[at] = g[at] + v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spatial_window_takes_maximum() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let p = maxpool3d(&x, [1, 2, 2]).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::full(&[2, 4, 4, 4], -0.25f64).unwrap();
        let p = maxpool3d(&x, [2, 2, 2]).unwrap();
        assert_eq!(p.output.shape(), &[2, 2, 2, 2]);
        assert!(p.output.data().iter().all(|&v| v == -0.25));
    }

    #[test]
    fn truncates_partial_windows_and_rejects_oversized() {
        let x = Tensor::<f64>::zeros(&[1, 3, 5, 5]).unwrap();
        assert_eq!(maxpool3d(&x, [2, 2, 2]).unwrap().output.shape(), &[1, 1, 2, 2]);
        assert!(matches!(maxpool3d(&x, [4, 1, 1]), Err(crate::Error::Shape(_))));
        let flat = Tensor::<f64>::zeros(&[2, 6, 6]).unwrap();
        assert_eq!(maxpool3d(&flat, [1, 2, 2]).unwrap().output.shape(), &[2, 3, 3]);
    }

    #[test]
    fn matches_exhaustive_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = Tensor::from_vec(&[1, 4, 4, 4], data).unwrap();
        let p = maxpool3d(&x, [2, 2, 2]).unwrap();
        for ot in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for dt in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.get(&[0, 2 * ot + dt, 2 * oy + dy, 2 * ox + dx]));
                            }
                        }
                    }
                    assert_eq!(p.output.get(&[0, ot, oy, ox]), m);
                }
            }
        }
        assert!(p.output.max() <= x.max());
        assert_eq!(p.output.max(), x.max());
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f64, 5.0, 3.0, 4.0]).unwrap();
        let p = maxpool3d(&x, [1, 2, 2]).unwrap();
        let g = maxpool3d_backward(x.shape(), &p.argmax, &Tensor::full(&[1, 1, 1], 2.0).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
