//! Dense row-major matrices over f32 (training) or f64 (gradient checks).

use std::fmt;
use std::iter::Sum;

/// Scalar precision the engine runs at. Training uses f32, the
/// finite-difference oracles re-run the same graphs at f64.
pub trait Scalar:
    Copy + PartialOrd + fmt::Debug + fmt::Display + Sum + Send + Sync + 'static
    + std::ops::Add<Output = Self> + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self> + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self> + std::ops::AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_nan(self) -> bool;
    fn is_finite(self) -> bool;
    /// c += a * b with explicit row/col strides (blocked gemm kernel).
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        c: &mut [Self], rsc: isize, csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self { x as f32 }
    fn to_f64(self) -> f64 { self as f64 }
    fn exp(self) -> Self { f32::exp(self) }
    fn ln(self) -> Self { f32::ln(self) }
    fn ln_1p(self) -> Self { f32::ln_1p(self) }
    fn sqrt(self) -> Self { f32::sqrt(self) }
    fn is_nan(self) -> bool { f32::is_nan(self) }
    fn is_finite(self) -> bool { f32::is_finite(self) }
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        c: &mut [Self], rsc: isize, csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n,
                1.0, a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                1.0, c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self { x }
    fn to_f64(self) -> f64 { self }
    fn exp(self) -> Self { f64::exp(self) }
    fn ln(self) -> Self { f64::ln(self) }
    fn ln_1p(self) -> Self { f64::ln_1p(self) }
    fn sqrt(self) -> Self { f64::sqrt(self) }
    fn is_nan(self) -> bool { f64::is_nan(self) }
    fn is_finite(self) -> bool { f64::is_finite(self) }
    fn gemm_strided(
        m: usize, k: usize, n: usize,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        c: &mut [Self], rsc: isize, csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n,
                1.0, a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                1.0, c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

/// c += a(m,k) * b(k,n), all row-major.
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    S::gemm_strided(m, k, n, a, k as isize, 1, b, n as isize, 1, c, n as isize, 1);
}

/// c += a(m,k) * b(n,k)^T, all row-major.
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    S::gemm_strided(m, k, n, a, k as isize, 1, b, 1, k as isize, c, n as isize, 1);
}

/// c += a(k,m)^T * b(k,n), all row-major.
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    S::gemm_strided(m, k, n, a, 1, m as isize, b, n as isize, 1, c, n as isize, 1);
}

/// Dense row-major matrix. Vectors are 1xN, scalars 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![S::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row_vector(data: Vec<S>) -> Self {
        Tensor { rows: 1, cols: data.len(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert precision, e.g. an f32 training tensor into an f64 oracle tensor.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}
