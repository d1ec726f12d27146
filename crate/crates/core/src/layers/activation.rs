use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Passes the upstream gradient where the forward input was positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(shape_err!("relu gradient {:?} vs input {:?}", grad_out.shape(), input.shape()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Numerically stable softmax over a flat slice.
pub fn softmax_slice<T: Real>(f: &[T]) -> Vec<T> {
    let m = f.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = f.iter().map(|&x| (x - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `log(sum(exp(f)))` with max subtraction.
pub fn log_sum_exp<T: Real>(f: &[T]) -> T {
    let m = f.iter().copied().fold(T::neg_infinity(), T::max);
    m + f.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Softmax over all elements of `f`.
pub fn softmax<T: Real>(f: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(f.shape(), softmax_slice(f.data())).expect("shape preserved")
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_backward<T: Real>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != grad_out.shape() {
        return Err(shape_err!("softmax gradient {:?} vs output {:?}", grad_out.shape(), output.shape()));
    }
    let dot: T = output.data().iter().zip(grad_out.data()).map(|(&y, &g)| y * g).sum();
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| y * (g - dot))
        .collect();
    Tensor::from_vec(output.shape(), data)
}
