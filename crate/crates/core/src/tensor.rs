//! Dense row-major tensors.
//!
//! Almost everything here is rank 2 (matrices) or rank 1 (bias vectors). The
//! only broadcast supported is adding a bias vector to every row of a matrix.


use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Mismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-{rank} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        rank: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(ShapeError::Invalid {
                op: "new",
                detail: format!("zero extent in shape {shape:?}"),
            });
        }
        if expected != data.len() {
            return Err(ShapeError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// 1×n matrix.
    pub fn row_vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
    }

    /// n×1 matrix.
    pub fn col_vector(values: Vec<T>) -> Self {
        Self {
            shape: vec![values.len(), 1],
            data: values,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self, ShapeError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(ShapeError::Invalid {
                    op: "from_rows",
                    detail: format!("ragged rows: {} vs {}", row.len(), cols),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    /// Builds a matrix from `f64` rows; handy for literals in tests and catalogs.
    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, ShapeError> {
        let converted: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&v| T::lit(v)).collect())
            .collect();
        Self::from_rows(&converted)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count when viewed as a matrix (rank-1 tensors are a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(ShapeError::DataLength {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Value of a 1×1 (or single-element) tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.as_f64()).expect("cast"))
                .collect(),
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize), ShapeError> {
        if self.shape.len() != 2 {
            return Err(ShapeError::Rank {
                op,
                rank: 2,
                shape: self.shape.clone(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::Mismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// `self · b`.
    pub fn matmul(&self, b: &Self) -> Result<Self, ShapeError> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, n) = b.require_matrix("matmul")?;
        if k != k2 {
            return Err(ShapeError::Mismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for (a_row, out_row) in self.data.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n.max(1))) {
            for (p, &a_ip) in a_row.iter().enumerate() {
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a_ip * bv;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · bᵀ`.
    pub fn matmul_t(&self, b: &Self) -> Result<Self, ShapeError> {
        let (m, k) = self.require_matrix("matmul_t")?;
        let (n, k2) = b.require_matrix("matmul_t")?;
        if k != k2 {
            return Err(ShapeError::Mismatch {
                op: "matmul_t",
                left: self.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                out.push(dot(a_row, &b.data[j * k..(j + 1) * k]));
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · b`.
    pub fn t_matmul(&self, b: &Self) -> Result<Self, ShapeError> {
        let (k, m) = self.require_matrix("t_matmul")?;
        let (k2, n) = b.require_matrix("t_matmul")?;
        if k != k2 {
            return Err(ShapeError::Mismatch {
                op: "t_matmul",
                left: self.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (i, &a_pi) in a_row.iter().enumerate() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a_pi * bv;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self, ShapeError> {
        let (m, n) = self.require_matrix("transpose")?;
        Ok(Self::from_fn(n, m, |i, j| self.data[j * n + i]))
    }

    pub fn add(&self, other: &Self) -> Result<Self, ShapeError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, ShapeError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self, ShapeError> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self, ShapeError> {
        self.same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), ShapeError> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self + 1·biasᵀ`: adds `bias` (length = column count) to every row.
    pub fn add_row_bias(&self, bias: &Self) -> Result<Self, ShapeError> {
        let (_, n) = self.require_matrix("add_row_bias")?;
        if bias.len() != n {
            return Err(ShapeError::Mismatch {
                op: "add_row_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(n.max(1)) {
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Self, ShapeError> {
        let (_, n) = self.require_matrix("softmax_rows")?;
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(n.max(1)) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(out)
    }

    /// Element-wise GELU, exact erf form: `x·Φ(x)`.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, rho: T) -> Result<Self, ShapeError> {
        Ok(self.layer_norm_parts(gamma, beta, rho)?.0)
    }

    /// Layer norm returning `(output, normalized rows, 1/√(σ²+ρ) per row)`.
    pub(crate) fn layer_norm_parts(&self, gamma: &Self, beta: &Self, rho: T) -> Result<(Self, Self, Vec<T>), ShapeError> {
        let d = self.cols();
        if self.shape.is_empty() || d < 2 {
            return Err(ShapeError::Invalid {
                op: "layer_norm",
                detail: format!("row width must be at least 2, shape {:?}", self.shape),
            });
        }
        if gamma.len() != d || beta.len() != d {
            return Err(ShapeError::Mismatch {
                op: "layer_norm",
                left: self.shape.clone(),
                right: gamma.shape.clone(),
            });
        }
        if !(rho > T::zero()) {
            return Err(ShapeError::Invalid {
                op: "layer_norm",
                detail: "epsilon must be positive".into(),
            });
        }
        let dn = T::from_usize(d).unwrap();
        let mut out = self.clone();
        let mut normalized = self.clone();
        let mut inv_std = Vec::with_capacity(self.rows());
        for (row, (norm_row, out_row)) in self
            .data
            .chunks_exact(d)
            .zip(normalized.data.chunks_exact_mut(d).zip(out.data.chunks_exact_mut(d)))
        {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + rho).sqrt();
            inv_std.push(inv);
            for k in 0..d {
                let xh = (row[k] - mean) * inv;
                norm_row[k] = xh;
                out_row[k] = gamma.data[k] * xh + beta.data[k];
            }
        }
        Ok((out, normalized, inv_std))
    }

    /// Contiguous block of rows.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self, ShapeError> {
        let (m, n) = self.require_matrix("slice_rows")?;
        if start + len > m {
            return Err(ShapeError::Invalid {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {m}", start + len),
            });
        }
        Ok(Self {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self, ShapeError> {
        let first = parts.first().ok_or(ShapeError::Invalid {
            op: "concat_cols",
            detail: "nothing to concatenate".into(),
        })?;
        let m = first.require_matrix("concat_cols")?.0;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = p.require_matrix("concat_cols")?;
            if pm != m {
                return Err(ShapeError::Mismatch {
                    op: "concat_cols",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            total += pn;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self {
            shape: vec![m, total],
            data,
        })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    /// `(self + selfᵀ)/2` for square matrices.
    pub fn symmetrized(&self) -> Result<Self, ShapeError> {
        let (m, n) = self.require_matrix("symmetrized")?;
        if m != n {
            return Err(ShapeError::Invalid {
                op: "symmetrized",
                detail: format!("matrix is {m}×{n}"),
            });
        }
        let half = T::lit(0.5);
        Ok(Self::from_fn(n, n, |i, j| (self.data[i * n + j] + self.data[j * n + i]) * half))
    }

    /// Matrix-vector product with a plain slice.
    pub fn mul_vec(&self, x: &[T]) -> Result<Vec<T>, ShapeError> {
        let (m, n) = self.require_matrix("mul_vec")?;
        if x.len() != n {
            return Err(ShapeError::Mismatch {
                op: "mul_vec",
                left: self.shape.clone(),
                right: vec![x.len()],
            });
        }
        Ok((0..m).map(|i| dot(&self.data[i * n..(i + 1) * n], x)).collect())
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * std_normal_cdf(x)
}

#[inline]
pub(crate) fn std_normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub(crate) fn std_normal_pdf<T: Scalar>(x: T) -> T {
    T::lit(0.398_942_280_401_432_7) * (-(x * x) * T::lit(0.5)).exp()
}
