use std::fmt;

use super::NdError;

/// Dense row-major `f64` array.
///
/// Scalars use the empty shape `[]`; vectors `[n]`; matrices `[rows, cols]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NdError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NdError::Invalid {
                op: "new",
                msg: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NdError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64, NdError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NdError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), NdError> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(NdError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {other:?}"),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NdError> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), NdError> {
        if self.shape != other.shape {
            return Err(NdError::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, NdError> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, NdError> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, NdError> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_in_place(&mut self, other: &Tensor) -> Result<(), NdError> {
        self.check_same_shape(other, "add_in_place")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NdError> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(NdError::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }

    /// Adds a bias vector (`[n]` or `[1, n]`) to every row of `[m, n]`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor, NdError> {
        let (m, n) = self.dims2("add_bias")?;
        if bias.len() != n || bias.shape.len() > 2 || (bias.shape.len() == 2 && bias.shape[0] != 1) {
            return Err(NdError::Shape {
                op: "add_bias",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor, NdError> {
        let (m, n) = self.dims2("slice_rows")?;
        if start > end || end > m {
            return Err(NdError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} out of bounds for shape {:?}", self.shape),
            });
        }
        Tensor::matrix(end - start, n, self.data[start * n..end * n].to_vec())
    }

    /// Row subset by index; used to assemble minibatches.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor, NdError> {
        let (m, n) = self.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(NdError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {i} out of bounds for shape {:?}", self.shape),
                });
            }
            out.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Tensor::matrix(idx.len(), n, out)
    }

    /// Row-wise `x - logsumexp(x)`.
    pub fn log_softmax_rows(&self) -> Result<Tensor, NdError> {
        let (m, n) = self.dims2("log_softmax")?;
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Picks `x[r, labels[r]]` from each row, giving a `[rows]` vector.
    pub fn pick_rows(&self, labels: &[usize]) -> Result<Tensor, NdError> {
        let (m, n) = self.dims2("pick")?;
        if labels.len() != m {
            return Err(NdError::Shape {
                op: "pick",
                left: self.shape.clone(),
                right: vec![labels.len()],
            });
        }
        let mut out = Vec::with_capacity(m);
        for (r, &c) in labels.iter().enumerate() {
            if c >= n {
                return Err(NdError::Invalid {
                    op: "pick",
                    msg: format!("label {c} out of range for {n} columns"),
                });
            }
            out.push(self.data[r * n + c]);
        }
        Ok(Tensor::vector(out))
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
pub(crate) fn matmul_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
}
