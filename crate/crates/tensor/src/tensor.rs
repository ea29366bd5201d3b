use crate::{Result, TensorError};

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-major dense matrix with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(TensorError::Buffer {
                shape: [rows, cols],
                len: data.len(),
            });
        }
        Ok(Self {
            shape: [rows, cols],
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// A `1 × n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            shape: [1, n],
            data: values,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Dimension {
                op: "from_rows",
                lhs: [1, cols],
                rhs: [1, bad.len()],
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: [rows, cols],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Installs a gradient buffer; it must match the data length.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Buffer {
                shape: self.shape,
                len: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let cols = self.shape[1];
        self.data[i * cols + j] = value;
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    fn check_same(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Dimension {
                op,
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let [m, k] = self.shape;
        let [k2, n] = rhs.shape;
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: self.shape,
                rhs: rhs.shape,
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(m, n, out)
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let [k, m] = self.shape;
        let [k2, n] = rhs.shape;
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "t_matmul",
                lhs: self.shape,
                rhs: rhs.shape,
            });
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &rhs.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(m, n, out)
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let [m, k] = self.shape;
        let [n, k2] = rhs.shape;
        if k != k2 {
            return Err(TensorError::Dimension {
                op: "matmul_t",
                lhs: self.shape,
                rhs: rhs.shape,
            });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let [m, n] = self.shape;
        Tensor::from_fn(n, m, |i, j| self.data[j * n + i])
    }

    /// Elementwise sum; `rhs` may also be a `1 × cols` row broadcast over rows.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("sub", rhs, |a, b| a - b)
    }

    /// Elementwise product; `rhs` may also be a `1 × cols` row broadcast over rows.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_broadcast("mul", rhs, |a, b| a * b)
    }

    pub(crate) fn is_row_broadcast(&self, rhs: &Tensor) -> Result<bool> {
        if self.shape == rhs.shape {
            Ok(false)
        } else if rhs.shape[0] == 1 && rhs.shape[1] == self.shape[1] {
            Ok(true)
        } else {
            Err(TensorError::Dimension {
                op: "broadcast",
                lhs: self.shape,
                rhs: rhs.shape,
            })
        }
    }

    fn zip_broadcast(
        &self,
        op: &'static str,
        rhs: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let broadcast = self.is_row_broadcast(rhs).map_err(|_| TensorError::Dimension {
            op,
            lhs: self.shape,
            rhs: rhs.shape,
        })?;
        let cols = self.shape[1];
        let data = if broadcast {
            self.data
                .iter()
                .enumerate()
                .map(|(idx, &a)| f(a, rhs.data[idx % cols]))
                .collect()
        } else {
            self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect()
        };
        Tensor::new(self.shape[0], cols, data)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn add_assign_scaled(&mut self, rhs: &Tensor, factor: f64) -> Result<()> {
        self.check_same("add_assign_scaled", rhs)?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        let rows = parts.first().map_or(0, |t| t.rows());
        for p in parts {
            if p.rows() != rows {
                return Err(TensorError::Dimension {
                    op: "concat_cols",
                    lhs: parts[0].shape,
                    rhs: p.shape,
                });
            }
        }
        let cols: usize = parts.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row_slice(i));
            }
        }
        Tensor::new(rows, cols, data)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let cols = parts.first().map_or(0, |t| t.cols());
        for p in parts {
            if p.cols() != cols {
                return Err(TensorError::Dimension {
                    op: "concat_rows",
                    lhs: parts[0].shape,
                    rhs: p.shape,
                });
            }
        }
        let rows: usize = parts.iter().map(|t| t.rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::new(rows, cols, data)
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.rows() {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                bound: self.rows(),
            });
        }
        let c = self.cols();
        Tensor::new(end - start, c, self.data[start * c..end * c].to_vec())
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.cols() {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                bound: self.cols(),
            });
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(self.rows() * (end - start));
        for i in 0..self.rows() {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor::new(self.rows(), end - start, data)
    }

    /// Keeps only the listed columns, in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.cols()) {
            return Err(TensorError::Index {
                op: "select_cols",
                index: bad,
                bound: self.cols(),
            });
        }
        Ok(Tensor::from_fn(self.rows(), cols.len(), |i, j| {
            self.get(i, cols[j])
        }))
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.rows()) {
            return Err(TensorError::Index {
                op: "select_rows",
                index: bad,
                bound: self.rows(),
            });
        }
        Ok(Tensor::from_fn(rows.len(), self.cols(), |i, j| {
            self.get(rows[i], j)
        }))
    }

    /// Copies `self` into the top-left corner of a zero tensor of at least its size.
    pub fn embed_into(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows < self.rows() || cols < self.cols() {
            return Err(TensorError::Dimension {
                op: "embed_into",
                lhs: self.shape,
                rhs: [rows, cols],
            });
        }
        let mut out = Tensor::zeros(rows, cols);
        for i in 0..self.rows() {
            out.data[i * cols..i * cols + self.cols()].copy_from_slice(self.row_slice(i));
        }
        Ok(out)
    }

    /// Per-row normalisation to zero mean and unit (biased) variance.
    pub fn layernorm_rows(&self) -> Tensor {
        self.layernorm_with_stats().0
    }

    pub(crate) fn layernorm_with_stats(&self) -> (Tensor, Vec<f64>) {
        let [m, n] = self.shape;
        let mut out = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = self.row_slice(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        (
            Tensor {
                shape: self.shape,
                data: out,
                grad: None,
                requires_grad: false,
            },
            inv_std,
        )
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Tensor {
        let [m, n] = self.shape;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = self.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in dst.iter_mut() {
                *o /= total;
            }
        }
        Tensor {
            shape: self.shape,
            data: out,
            grad: None,
            requires_grad: false,
        }
    }

    /// Per-row `-log softmax(row)[target]`.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Result<Vec<f64>> {
        let [m, n] = self.shape;
        if targets.len() != m {
            return Err(TensorError::Dimension {
                op: "cross_entropy",
                lhs: self.shape,
                rhs: [targets.len(), 1],
            });
        }
        let mut losses = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: n,
                });
            }
            let row = self.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[t]);
        }
        Ok(losses)
    }
}
