//! Dense row-major tensors of 64-bit floats.
//!
//! Everything downstream (attention blocks, consolidation, training) moves
//! through this type. Values are immutable once built into a graph; the
//! mutating helpers exist for construction and optimizer updates only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::fm;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(CoreError::shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        if expected != data.len() {
            return Err(CoreError::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Rank-2 tensor from a row-major flat slice.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Rank-2 tensor from nested rows; every row must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CoreError::EmptyInput {
                context: "Tensor::from_rows",
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(CoreError::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Row count for rank-2 tensors; a rank-1 tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() requires rank 1 or 2, got {:?}", self.shape),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() requires rank 1 or 2, got {:?}", self.shape),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(CoreError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn zeros_like(&self) -> Tensor {
        Tensor::zeros(self.shape.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
        })
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            requires_grad: false,
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.rank2("matmul")?;
        let (k2, m) = other.rank2("matmul")?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.rank2("transpose")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Rows `[start, start+len)` as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, m) = self.rank2("slice_rows")?;
        if start + len > n || len == 0 {
            return Err(CoreError::shape(format!(
                "slice_rows [{start}, {}) out of {n} rows",
                start + len
            )));
        }
        Tensor::matrix(len, m, self.data[start * m..(start + len) * m].to_vec())
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, m) = self.rank2("slice_cols")?;
        if start + len > m || len == 0 {
            return Err(CoreError::shape(format!(
                "slice_cols [{start}, {}) out of {m} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * m + start..i * m + start + len]);
        }
        Tensor::matrix(n, len, data)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CoreError::EmptyInput {
                context: "concat_rows",
            });
        }
        let (_, m) = parts[0].rank2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pn, pm) = p.rank2("concat_rows")?;
            if pm != m {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += pn;
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, m, data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(CoreError::EmptyInput {
                context: "concat_cols",
            });
        }
        let (n, _) = parts[0].rank2("concat_cols")?;
        let mut cols = 0;
        for p in parts {
            let (pn, pm) = p.rank2("concat_cols")?;
            if pn != n {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            cols += pm;
        }
        let mut data = Vec::with_capacity(n * cols);
        for i in 0..n {
            for p in parts {
                let pm = p.cols();
                data.extend_from_slice(&p.data[i * pm..(i + 1) * pm]);
            }
        }
        Tensor::matrix(n, cols, data)
    }

    /// Row-wise softmax with max subtraction; rows sum to 1 for finite input.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, m) = self.rank2("softmax_rows")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.data[i * m..(i + 1) * m];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let o = &mut out[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = fm::exp(v - max);
                sum += *dst;
            }
            for dst in o.iter_mut() {
                *dst /= sum;
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Row-wise log-softmax via the log-sum-exp trick.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let (n, m) = self.rank2("log_softmax_rows")?;
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.data[i * m..(i + 1) * m];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|&v| fm::exp(v - max)).sum();
            let lse = max + fm::ln(sum);
            for (dst, &v) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *dst = v - lse;
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Mean of all rows as a 1-by-d tensor.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (n, m) = self.rank2("mean_rows")?;
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += self.data[i * m + j];
            }
        }
        for v in out.iter_mut() {
            *v /= n as f64;
        }
        Tensor::matrix(1, m, out)
    }

    /// Squared L2 distance between row `r` of `self` and row `s` of `other`.
    pub fn row_dist_sq(&self, r: usize, other: &Tensor, s: usize) -> f64 {
        let a = self.row(r);
        let b = other.row(s);
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            let d = x - y;
            acc += d * d;
        }
        acc
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CoreError::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Tensor::new(shape, self.data.clone())
    }
}

/// Row-wise layer normalization with affine gain and bias, epsilon on the
/// variance. Shared by the graph operation and the plain helpers so both
/// paths are bit-identical.
pub(crate) fn layer_norm_rows(x: &Tensor, gain: &[f64], bias: &[f64], eps: f64) -> Tensor {
    let n = x.rows();
    let d = x.cols();
    debug_assert_eq!(gain.len(), d);
    debug_assert_eq!(bias.len(), d);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / fm::sqrt(var + eps);
        for j in 0..d {
            out[i * d + j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    Tensor::matrix(n, d, out).expect("layer_norm_rows shape")
}

/// Exact GELU, `0.5 x (1 + erf(x / sqrt(2)))`.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_prime(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + fm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = fm::exp(-0.5 * x * x) / fm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Squared-norm floor inside row normalization; keeps the map smooth at the
/// origin while leaving any row with norm >= 1e-6 unit length to well below
/// 1e-8.
pub(crate) const NORMALIZE_EPS_SQ: f64 = 1e-24;

pub(crate) fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let n = x.rows();
    let d = x.cols();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = x.row(i);
        let norm = fm::sqrt(row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_EPS_SQ);
        for j in 0..d {
            out[i * d + j] = row[j] / norm;
        }
    }
    Tensor::matrix(n, d, out).expect("l2_normalize_rows shape")
}
