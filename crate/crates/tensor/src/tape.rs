use crate::tensor::{gelu, gelu_grad, sigmoid};
use crate::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var, broadcast: bool },
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, probs: Tensor, targets: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert list for one forward pass.
///
/// Nodes are appended in evaluation order; a node only references nodes
/// with smaller indices, so the insertion order is topological.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    last_backward: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only propagated towards leaves whose
    /// tensor has `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(true), Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Gradient of `v` as a tensor shaped like its value, zeros if no gradient reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        match value.grad() {
            Some(g) => Tensor::new(value.rows(), value.cols(), g.to_vec())
                .expect("grad buffer matches value shape"),
            None => Tensor::zeros(value.rows(), value.cols()),
        }
    }

    /// Node indices visited by the most recent [`Tape::backward`], in visit order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_backward
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn push_derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.tracked(inputs);
        self.push(value.with_requires_grad(rg), op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_derived(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_derived(out, Op::Transpose(a), &[a])
    }

    /// Elementwise sum; `b` may be a `1 × cols` row broadcast across rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.value(a).is_row_broadcast(self.value(b))?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push_derived(out, Op::Add { a, b, broadcast }, &[a, b]))
    }

    /// Elementwise product; `b` may be a `1 × cols` row broadcast across rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.value(a).is_row_broadcast(self.value(b))?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push_derived(out, Op::Mul { a, b, broadcast }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        self.push_derived(out, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_derived(out, Op::Sigmoid(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push_derived(out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push_derived(out, Op::Relu(a), &[a])
    }

    /// Row normalisation without affine parameters.
    pub fn layernorm(&mut self, x: Var) -> Var {
        let (out, inv_std) = self.value(x).layernorm_with_stats();
        self.push_derived(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        self.push_derived(out, Op::SoftmaxRows(a), &[a])
    }

    /// Mean cross-entropy of row-wise softmax against class indices, as a `1 × 1` tensor.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let losses = z.cross_entropy_rows(targets)?;
        let mean = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let probs = z.softmax_rows();
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets: targets.to_vec(),
        };
        Ok(self.push_derived(Tensor::row(vec![mean]), op, &[logits]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push_derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push_derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, end)?;
        Ok(self.push_derived(out, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, end)?;
        Ok(self.push_derived(out, Op::SliceCols { x, start }, &[x]))
    }

    /// Sum of all elements as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::row(vec![self.value(x).sum()]);
        self.push_derived(out, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar output. Fills the gradient slot of every
    /// node that depends on a `requires_grad` leaf; previous gradients are
    /// discarded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.value(output).shape();
        if shape != [1, 1] {
            return Err(TensorError::Invalid(format!(
                "backward needs a 1 x 1 output, got {shape:?}"
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[output.0] = Some(vec![1.0]);
        self.last_backward.clear();

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.last_backward.push(idx);
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[idx].value.requires_grad() {
                    self.nodes[idx].value.set_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        let upstream = || Tensor::new(out_shape[0], out_shape[1], g.to_vec());
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let gt = upstream()?;
                if self.wants(*a) {
                    let ga = gt.matmul_t(self.value(*b))?;
                    accumulate(grads, *a, ga.data());
                }
                if self.wants(*b) {
                    let gb = self.value(*a).t_matmul(&gt)?;
                    accumulate(grads, *b, gb.data());
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let gt = upstream()?.transpose();
                    accumulate(grads, *a, gt.data());
                }
            }
            Op::Add { a, b, broadcast } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    if *broadcast {
                        accumulate(grads, *b, &column_sums(g, out_shape[1]));
                    } else {
                        accumulate(grads, *b, g);
                    }
                }
            }
            Op::Mul { a, b, broadcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let cols = out_shape[1];
                if self.wants(*a) {
                    let ga: Vec<f64> = if *broadcast {
                        g.iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bv[i % cols])
                            .collect()
                    } else {
                        g.iter().zip(bv).map(|(gi, bi)| gi * bi).collect()
                    };
                    accumulate(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(av).map(|(gi, ai)| gi * ai).collect();
                    if *broadcast {
                        accumulate(grads, *b, &column_sums(&prod, cols));
                    } else {
                        accumulate(grads, *b, &prod);
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.wants(*a) {
                    let ga: Vec<f64> = g.iter().map(|v| v * f).collect();
                    accumulate(grads, *a, &ga);
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect();
                    accumulate(grads, *a, &ga);
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let ga: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi * gelu_grad(*xi)).collect();
                    accumulate(grads, *a, &ga);
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a).data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(grads, *a, &ga);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if self.wants(*x) {
                    let [m, n] = out_shape;
                    let y = node.value.data();
                    let mut gx = vec![0.0; m * n];
                    for i in 0..m {
                        let gy = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let mean_g = gy.iter().sum::<f64>() / n as f64;
                        let mean_gy =
                            gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] = inv_std[i] * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let [m, n] = out_shape;
                    let y = node.value.data();
                    let mut ga = vec![0.0; m * n];
                    for i in 0..m {
                        let gy = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[i * n + j] = yr[j] * (gy[j] - dot);
                        }
                    }
                    accumulate(grads, *a, &ga);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                if self.wants(*logits) && !targets.is_empty() {
                    let n = probs.cols();
                    let scale = g[0] / targets.len() as f64;
                    let mut gz: Vec<f64> = probs.data().iter().map(|p| p * scale).collect();
                    for (i, &t) in targets.iter().enumerate() {
                        gz[i * n + t] -= scale;
                    }
                    accumulate(grads, *logits, &gz);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = out_shape[0];
                let total = out_shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        accumulate(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let c = src.cols();
                    let mut gx = vec![0.0; src.len()];
                    gx[start * c..start * c + g.len()].copy_from_slice(g);
                    accumulate(grads, *x, &gx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let src = self.value(*x);
                    let c = src.cols();
                    let w = out_shape[1];
                    let mut gx = vec![0.0; src.len()];
                    for i in 0..out_shape[0] {
                        gx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let gx = vec![g[0]; self.value(*x).len()];
                    accumulate(grads, *x, &gx);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, v) in g.iter().enumerate() {
        out[i % cols] += v;
    }
    out
}
