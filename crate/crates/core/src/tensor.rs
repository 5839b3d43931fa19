//! Dense row-major `f64` tensors and the small set of raw kernels the tape
//! and the graph code are built on.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{dim_err, Error, Result};

/// Dense, row-major array of `f64` values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} must have positive extents"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(dim_err!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "shape {shape:?} must have positive extents"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(&[n], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(n * c);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != c {
                return Err(dim_err!("row {i} has {} values, expected {c}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(&[n, c], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a matrix (leading extent).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix (product of trailing extents).
    pub fn cols(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        // A value is non-finite exactly when its exponent bits are all set.
        // OR-reducing a flag keeps the loop branch-free so it vectorizes.
        const EXP: u64 = 0x7ff0_0000_0000_0000;
        self.data.iter().fold(0u64, |bad, x| bad | u64::from(x.to_bits() & EXP == EXP)) == 0
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(libm::fabs(x)))
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|x| x * x).sum())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max(libm::fabs(a - b))))
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(dim_err!("transpose needs a matrix, got {:?}", self.shape));
        }
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Self::new(&[m, n], out)
    }

    /// Plain matrix product with no tape involvement.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k, n) = matmul_dims(self, other)?;
        let mut out = vec![0.0; m * n];
        gemm_nn_acc(&mut out, &self.data, &other.data, m, k, n);
        Self::new(&[m, n], out)
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub(crate) fn check_matrix(&self, op: &str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(dim_err!("{op}: expected a matrix, got {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, k) = a.check_matrix("matmul")?;
    let (k2, n) = b.check_matrix("matmul")?;
    if k != k2 {
        return Err(Error::Dimension(alloc::format!(
            "matmul: inner extents {k} and {k2} disagree"
        )));
    }
    Ok((m, k, n))
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c += op(a) · op(b)` through the blocked kernel of `matrixmultiply`;
/// the strides select the transposes. `c` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
fn dense_acc(c: &mut [f64], a: &[f64], a_strides: (isize, isize), b: &[f64], b_strides: (isize, isize), m: usize, k: usize, n: usize) {
    assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n, "gemm operand too short");
    // SAFETY: the asserts above bound every offset the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Dense `c += a · b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    dense_acc(c, a, (k as isize, 1), b, (n as isize, 1), m, k, n);
}

/// `c += aᵀ · b` for row-major `a: m×k`, `b: m×n`; `c` is `k×n`.
pub(crate) fn gemm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    dense_acc(c, a, (1, k as isize), b, (n as isize, 1), k, m, n);
}

/// `c += a · bᵀ` for row-major `a: m×k`, `b: n×k`; `c` is `m×n`.
pub(crate) fn gemm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    dense_acc(c, a, (k as isize, 1), b, (1, k as isize), m, k, n);
}
