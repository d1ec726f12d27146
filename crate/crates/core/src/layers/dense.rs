use crate::error::{shape_err, Result};
use crate::tensor::{matmul, Real, Tensor};

/// `W x + b` for `weights [l, n]`; the input is flattened to length `n`.
pub fn fully_connected<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (l, n) = match *weights.shape() {
        [l, n] => (l, n),
        _ => return Err(shape_err!("expected [l, n] weights, got {:?}", weights.shape())),
    };
    if input.len() != n || bias.len() != l {
        return Err(shape_err!(
            "fully connected {n} -> {l} given input of {} and bias of {}",
            input.len(),
            bias.len()
        ));
    }
    let mut out = bias.data().to_vec();
    matmul(l, n, 1, weights.data(), false, input.data(), false, &mut out, true);
    Tensor::from_vec(&[l], out)
}

/// Returns `(dX, dW, db)` where `dW = g x^T` and `dX = W^T g`.
pub fn fully_connected_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (l, n) = match *weights.shape() {
        [l, n] => (l, n),
        _ => return Err(shape_err!("expected [l, n] weights, got {:?}", weights.shape())),
    };
    if input.len() != n || grad_out.len() != l {
        return Err(shape_err!(
            "fully connected {n} -> {l} given input of {} and gradient of {}",
            input.len(),
            grad_out.len()
        ));
    }
    let mut gw = vec![T::zero(); l * n];
    matmul(l, 1, n, grad_out.data(), false, input.data(), false, &mut gw, false);
    let mut gx = vec![T::zero(); n];
    matmul(n, l, 1, weights.data(), true, grad_out.data(), false, &mut gx, false);
    Ok((
        Tensor::from_vec(input.shape(), gx)?,
        Tensor::from_vec(&[l, n], gw)?,
        grad_out.clone().reshape(&[l])?,
    ))
}
