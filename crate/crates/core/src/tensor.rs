//! Dense row-major tensors.
//!
//! Every activation, kernel and gradient in the crate is a [`Tensor`]. The
//! element type is generic over [`Real`] so that a run can be fixed to 32-bit
//! (training) or 64-bit (gradient checking) precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

/// Floating-point element type of a tensor.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// Strided general matrix multiply `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Same contract as [`matrixmultiply::sgemm`]: every strided access must
    /// stay inside the buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `c (m x n) = op(a) * op(b) [+ c]`.
///
/// `a` holds an `m x k` matrix, or `k x m` when `trans_a`; likewise `b` holds
/// `k x n`, or `n x k` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserted lengths cover every index reachable from the strides.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("tensor must have at least one dimension"));
    }
    if let Some(d) = shape.iter().position(|&d| d == 0) {
        return Err(shape_err!("dimension {d} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    /// Creates a tensor of the given shape with every element set to `fill`.
    pub fn full(shape: &[usize], fill: T) -> Result<Self> {
        let n = check_dims(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![fill; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Wraps a row-major buffer; its length must equal the product of `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_dims(shape)?;
        if n != data.len() {
            return Err(shape_err!(
                "buffer of length {} does not fill shape {shape:?} ({n} elements)",
                data.len()
            ));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Zero tensor with the same shape as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Same elements under a new shape with equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    /// `self += alpha * src`, elementwise.
    pub fn axpy(&mut self, alpha: T, src: &Tensor<T>) -> Result<()> {
        if self.shape != src.shape {
            return Err(shape_err!("axpy between {:?} and {:?}", self.shape, src.shape));
        }
        for (d, &s) in self.data.iter_mut().zip(&src.data) {
            *d = *d + alpha * s;
        }
        Ok(())
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&self) -> T {
        self.sum_squares().sqrt()
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn scale(&mut self, c: T) {
        self.data.iter_mut().for_each(|x| *x = *x * c);
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element type conversion.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.to_f64_lossy())).collect(),
        }
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], v: T) {
        let o = self.offset(index);
        self.data[o] = v;
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(shape_err!("stack of {:?} and {:?}", first.shape, p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Self::from_vec(&shape, data)
    }

    /// Concatenates along the leading axis; trailing dimensions must agree.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("cannot concatenate zero tensors"))?;
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(shape_err!("concat of {:?} and {:?}", first.shape, p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Self::from_vec(&shape, data)
    }

    /// Slice `i` along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Self { shape, data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }
}
