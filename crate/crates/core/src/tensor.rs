//! Dense row-major tensors and the matrix-product kernels.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `c += a * b` on validated strided views.
    fn gemm_kernel(v: &GemmViews<'_, Self>, c: &mut [Self]);
}

/// Operands of one product: `a` is `[m, k]` and `b` is `[k, n]` under the
/// given row and column strides.
pub struct GemmViews<'a, T> {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a: &'a [T],
    pub a_strides: (usize, usize),
    pub b: &'a [T],
    pub b_strides: (usize, usize),
}

impl<T> GemmViews<'_, T> {
    fn check(&self, c_len: usize) {
        let extent = |len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize)| {
            rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < len
        };
        assert!(extent(self.a.len(), self.m, self.k, self.a_strides), "gemm: lhs view out of bounds");
        assert!(extent(self.b.len(), self.k, self.n, self.b_strides), "gemm: rhs view out of bounds");
        assert!(c_len >= self.m * self.n, "gemm: output too small");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:ident) => {
        impl Scalar for $t {
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[allow(unsafe_code)]
            fn gemm_kernel(v: &GemmViews<'_, Self>, c: &mut [Self]) {
                v.check(c.len());
                if v.m == 0 || v.n == 0 {
                    return;
                }
                // SAFETY: `check` proved every index the kernel touches lies
                // inside the borrowed slices, and `c` is uniquely borrowed.
                unsafe {
                    matrixmultiply::$kernel(
                        v.m,
                        v.k,
                        v.n,
                        1.0,
                        v.a.as_ptr(),
                        v.a_strides.0 as isize,
                        v.a_strides.1 as isize,
                        v.b.as_ptr(),
                        v.b_strides.0 as isize,
                        v.b_strides.1 as isize,
                        1.0,
                        c.as_mut_ptr(),
                        v.n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, sgemm);
impl_scalar!(f64, dgemm);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    Length { op: &'static str, len: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for {bound}")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: &'static str },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Length { op: "tensor", len: data.len(), shape: shape.to_vec() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
    }

    /// Samples i.i.d. uniform entries in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::Rng) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols().max(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::Shape { op: "reshape", lhs: self.shape, rhs: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| x.to_f64() * x.to_f64()).sum()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `[batch, rows, cols]` view of a matrix or a stack of matrices.
pub(crate) fn as_batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [r, c] => Some((1, *r, *c)),
        [lead @ .., r, c] if !lead.is_empty() => Some((lead.iter().product(), *r, *c)),
        _ => None,
    }
}

/// Work below this many multiply-adds runs on the calling thread.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 1 << 18;

/// `c[m,n] += op(a) * op(b)` where `op` optionally transposes a row-major
/// operand (`a` is stored `[k, m]` when `trans_a`, `b` is stored `[n, k]`
/// when `trans_b`). Rows of `c` may be split across threads; each element's
/// arithmetic does not depend on the split.
#[allow(clippy::too_many_arguments)]
pub fn gemm_t<T: Scalar>(a: &[T], trans_a: bool, b: &[T], trans_b: bool, c: &mut [T], m: usize, k: usize, n: usize) {
    let a_strides = if trans_a { (1, m) } else { (k, 1) };
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    #[cfg(feature = "parallel")]
    if m * k * n >= PARALLEL_THRESHOLD && m > 1 && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        let rows_per_task = m.div_ceil(rayon::current_num_threads()).max(1);
        c[..m * n].par_chunks_mut(rows_per_task * n).enumerate().for_each(|(t, chunk)| {
            let r0 = t * rows_per_task;
            let views = GemmViews { m: chunk.len() / n, k, n, a: &a[r0 * a_strides.0..], a_strides, b, b_strides };
            T::gemm_kernel(&views, chunk);
        });
        return;
    }
    T::gemm_kernel(&GemmViews { m, k, n, a, a_strides, b, b_strides }, c);
}

/// `c[m,n] += a[m,k] * b[k,n]`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_t(a, false, b, false, c, m, k, n);
}

/// Transposes a row-major `[rows, cols]` matrix.
pub fn transpose2<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Batched `[b,m,k] x [b,k,n]`.
pub fn batched_matmul<T: Scalar>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    for bi in 0..batch {
        gemm(&a[bi * m * k..(bi + 1) * m * k], &b[bi * k * n..(bi + 1) * k * n], &mut c[bi * m * n..(bi + 1) * m * n], m, k, n);
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_including_parallel_sizes() {
        let mut rng = crate::seeded_rng(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (70, 64, 90), (257, 33, 129)] {
            let a = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);
            let mut c = vec![0.0; m * n];
            gemm(a.data(), b.data(), &mut c, m, k, n);
            let expected = naive(a.data(), b.data(), m, k, n);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-9);
            }
            let at = transpose2(a.data(), m, k);
            let bt = transpose2(b.data(), k, n);
            let mut ct = vec![0.0; m * n];
            gemm_t(&at, true, &bt, true, &mut ct, m, k, n);
            for (x, y) in ct.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 3]).reshape(&[3, 2]).is_ok());
        let e = Tensor::<f32>::zeros(&[2, 3]).reshape(&[4, 2]).unwrap_err();
        assert_eq!(e.to_string(), "shape mismatch in reshape: [2, 3] vs [4, 2]");
        assert_eq!(as_batched(&[4, 2, 3]), Some((4, 2, 3)));
        assert_eq!(as_batched(&[3]), None);
    }
}
