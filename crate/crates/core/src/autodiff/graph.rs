use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gelu, gelu_grad, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, softmax_rows};
use super::tensor::{Result, Tensor, TensorError};
use crate::linalg;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Mul { a: usize, b: usize },
    MulRow { a: usize, row: usize },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    SoftmaxRows { a: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    Gelu { a: usize },
    Mean { a: usize, axis: Axis },
    Sum { a: usize },
    Slice { a: usize, axis: Axis, start: usize },
    Concat { parts: Vec<usize>, axis: Axis },
    GatherRows { a: usize, index: Vec<usize> },
    MseLoss { pred: usize, target: usize },
    LogDet { a: usize, inverse: Tensor },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(g) => {
            for (x, d) in g.data_mut().iter_mut().zip(delta) {
                *x += d;
            }
        }
        None => {
            let t = Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape matches value");
            *slot = Some(t);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { graph: self.id, index }
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVariable);
        }
        Ok(&self.nodes[v.index].value)
    }

    /// Appends an operation node, or a plain constant when no input needs gradients.
    fn record(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        if requires_grad {
            Ok(self.push(value, op, true))
        } else {
            Ok(self.push(value, Op::Leaf, false))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, k) = ta.dims("matmul")?;
        let (k2, n) = tb.dims("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.record("matmul", value, Op::MatMul { a: a.index, b: b.index }, &[a.index, b.index])
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, k) = ta.dims("matmul_nt")?;
        let (n, k2) = tb.dims("matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(&mut out, ta.data(), tb.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        self.record("matmul_nt", value, Op::MatMulNt { a: a.index, b: b.index }, &[a.index, b.index])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.check(a)?.transpose()?;
        self.record("transpose", value, Op::Transpose { a: a.index }, &[a.index])
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.record("add", value, Op::Add { a: a.index, b: b.index }, &[a.index, b.index])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        self.record("sub", value, Op::Sub { a: a.index, b: b.index }, &[a.index, b.index])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.record("mul", value, Op::Mul { a: a.index, b: b.index }, &[a.index, b.index])
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tr) = (self.check(a)?, self.check(row)?);
        let (m, n) = ta.dims(name)?;
        let (rr, rn) = tr.dims(name)?;
        if rr != 1 || rn != n {
            return Err(mismatch(name, ta, tr));
        }
        let rd = tr.data();
        let mut data = ta.data().to_vec();
        for r in 0..m {
            for (x, &b) in data[r * n..(r + 1) * n].iter_mut().zip(rd) {
                *x = f(*x, b);
            }
        }
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Adds a row vector (length = cols) to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "add_row", |x, b| x + b)?;
        self.record("add_row", value, Op::AddRow { a: a.index, row: row.index }, &[a.index, row.index])
    }

    /// Multiplies every row elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "mul_row", |x, b| x * b)?;
        self.record("mul_row", value, Op::MulRow { a: a.index, row: row.index }, &[a.index, row.index])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record("scale", value, Op::Scale { a: a.index, factor }, &[a.index])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|x| x + c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record("add_scalar", value, Op::AddScalar { a: a.index }, &[a.index])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims("softmax_rows")?;
        let value = Tensor::new(ta.shape().to_vec(), softmax_rows(ta.data(), m, n))?;
        self.record("softmax_rows", value, Op::SoftmaxRows { a: a.index }, &[a.index])
    }

    /// Per-row standardization `(x − μ) / sqrt(σ² + eps)` with population variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims("layer_norm")?;
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.record("layer_norm", value, Op::LayerNorm { a: a.index, inv_std }, &[a.index])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.record("gelu", value, Op::Gelu { a: a.index }, &[a.index])
    }

    /// Mean over `axis`; `Rows` collapses rows to a `1×n` row, `Cols` gives `m×1`.
    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims("mean")?;
        let d = ta.data();
        let value = match axis {
            Axis::Rows => Tensor::from_fn(1, n, |_, c| (0..m).map(|r| d[r * n + c]).sum::<f64>() / m as f64),
            Axis::Cols => Tensor::from_fn(m, 1, |r, _| d[r * n..(r + 1) * n].iter().sum::<f64>() / n as f64),
        };
        self.record("mean", value, Op::Mean { a: a.index, axis }, &[a.index])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.check(a)?.data().iter().sum();
        self.record("sum", Tensor::scalar(s), Op::Sum { a: a.index }, &[a.index])
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims("slice")?;
        let limit = if axis == Axis::Rows { m } else { n };
        if len == 0 || start + len > limit {
            return Err(TensorError::OutOfRange {
                op: "slice",
                start,
                end: start + len,
                len: limit,
            });
        }
        let d = ta.data();
        let value = match axis {
            Axis::Rows => Tensor::matrix(len, n, d[start * n..(start + len) * n].to_vec())?,
            Axis::Cols => Tensor::from_fn(m, len, |r, c| d[r * n + start + c]),
        };
        self.record("slice", value, Op::Slice { a: a.index, axis, start }, &[a.index])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let tensors = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let dims = tensors.iter().map(|t| t.dims("concat")).collect::<Result<Vec<_>>>()?;
        let value = match axis {
            Axis::Rows => {
                let n = dims[0].1;
                if let Some(i) = dims.iter().position(|d| d.1 != n) {
                    return Err(mismatch("concat", tensors[0], tensors[i]));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let data = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
                Tensor::matrix(rows, n, data)?
            }
            Axis::Cols => {
                let m = dims[0].0;
                if let Some(i) = dims.iter().position(|d| d.0 != m) {
                    return Err(mismatch("concat", tensors[0], tensors[i]));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m * cols);
                for r in 0..m {
                    for t in &tensors {
                        data.extend_from_slice(t.row(r));
                    }
                }
                Tensor::matrix(m, cols, data)?
            }
        };
        let idx: Vec<usize> = parts.iter().map(|p| p.index).collect();
        self.record("concat", value, Op::Concat { parts: idx.clone(), axis }, &idx)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ta = self.check(a)?;
        let (m, n) = ta.dims("gather_rows")?;
        if index.is_empty() {
            return Err(TensorError::Empty { op: "gather_rows" });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(TensorError::OutOfRange {
                op: "gather_rows",
                start: bad,
                end: bad + 1,
                len: m,
            });
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(ta.row(i));
        }
        let value = Tensor::matrix(index.len(), n, data)?;
        self.record(
            "gather_rows",
            value,
            Op::GatherRows {
                a: a.index,
                index: index.to_vec(),
            },
            &[a.index],
        )
    }

    /// Mean of squared differences over all entries.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.check(pred)?, self.check(target)?);
        if tp.shape() != tt.shape() {
            return Err(mismatch("mse_loss", tp, tt));
        }
        let n = tp.numel() as f64;
        let s = tp.data().iter().zip(tt.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
        self.record(
            "mse_loss",
            Tensor::scalar(s),
            Op::MseLoss {
                pred: pred.index,
                target: target.index,
            },
            &[pred.index, target.index],
        )
    }

    /// log det of a symmetric positive-definite matrix via Cholesky. The input
    /// is symmetrized first; the gradient is the (symmetric) inverse.
    pub fn logdet_psd(&mut self, a: Var) -> Result<Var> {
        let ta = self.check(a)?;
        let sym = linalg::symmetrize(ta)?;
        let l = linalg::cholesky(&sym)?;
        let value = Tensor::scalar(linalg::logdet_from_factor(&l));
        let requires = self.nodes[a.index].requires_grad;
        let inverse = if requires {
            linalg::symmetrize(&linalg::cholesky_solve(&l, &Tensor::eye(l.rows()))?)?
        } else {
            Tensor::scalar(0.0)
        };
        self.record("logdet_psd", value, Op::LogDet { a: a.index, inverse }, &[a.index])
    }

    /// Mean softmax cross-entropy of `logits` (one row per example) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.check(logits)?;
        let (m, n) = tl.dims("cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::OutOfRange {
                op: "cross_entropy",
                start: bad,
                end: bad + 1,
                len: n,
            });
        }
        let probs = softmax_rows(tl.data(), m, n);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -(probs[r * n + t].max(f64::MIN_POSITIVE)).ln())
            .sum::<f64>()
            / m as f64;
        self.record(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.index,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.index],
        )
    }

    /// Reverse sweep from a scalar `seed`. Every node that requires gradients
    /// receives one (zeros when the seed does not depend on it).
    pub fn backward(&mut self, seed: Var) -> Result<Gradients> {
        let seed_shape = self.check(seed)?.shape().to_vec();
        if seed_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar { shape: seed_shape });
        }
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[seed.index].requires_grad {
            grads[seed.index] = Some(Tensor::new(seed_shape, vec![1.0])?);
        }
        for idx in (0..=seed.index).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let gd = g.data();
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = ta.dims("").unwrap();
                let n = tb.dims("").unwrap().1;
                if wants(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm_nt_acc(&mut d, gd, tb.data(), m, n, k);
                    accumulate(&mut grads[*a], ta.shape(), &d);
                }
                if wants(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm_tn_acc(&mut d, ta.data(), gd, k, m, n);
                    accumulate(&mut grads[*b], tb.shape(), &d);
                }
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = ta.dims("").unwrap();
                let n = tb.dims("").unwrap().0;
                if wants(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm_nn_acc(&mut d, gd, tb.data(), m, n, k);
                    accumulate(&mut grads[*a], ta.shape(), &d);
                }
                if wants(*b) {
                    let mut d = vec![0.0; n * k];
                    gemm_tn_acc(&mut d, gd, ta.data(), n, m, k);
                    accumulate(&mut grads[*b], tb.shape(), &d);
                }
            }
            Op::Transpose { a } => {
                let ta = &nodes[*a].value;
                let t = g.transpose().unwrap();
                accumulate(&mut grads[*a], ta.shape(), t.data());
            }
            Op::Add { a, b } => {
                for i in [*a, *b] {
                    if wants(i) {
                        accumulate(&mut grads[i], nodes[i].value.shape(), gd);
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    accumulate(&mut grads[*a], nodes[*a].value.shape(), gd);
                }
                if wants(*b) {
                    let d: Vec<f64> = gd.iter().map(|x| -x).collect();
                    accumulate(&mut grads[*b], nodes[*b].value.shape(), &d);
                }
            }
            Op::AddRow { a, row } => {
                if wants(*a) {
                    accumulate(&mut grads[*a], nodes[*a].value.shape(), gd);
                }
                if wants(*row) {
                    let (m, n) = out.dims("").unwrap();
                    let mut d = vec![0.0; n];
                    for r in 0..m {
                        for (x, y) in d.iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads[*row], nodes[*row].value.shape(), &d);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let d: Vec<f64> = gd.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*a], ta.shape(), &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = gd.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*b], tb.shape(), &d);
                }
            }
            Op::MulRow { a, row } => {
                let (ta, tr) = (&nodes[*a].value, &nodes[*row].value);
                let (m, n) = ta.dims("").unwrap();
                if wants(*a) {
                    let mut d = gd.to_vec();
                    for r in 0..m {
                        for (x, y) in d[r * n..(r + 1) * n].iter_mut().zip(tr.data()) {
                            *x *= y;
                        }
                    }
                    accumulate(&mut grads[*a], ta.shape(), &d);
                }
                if wants(*row) {
                    let mut d = vec![0.0; n];
                    let ad = ta.data();
                    for r in 0..m {
                        for c in 0..n {
                            d[c] += gd[r * n + c] * ad[r * n + c];
                        }
                    }
                    accumulate(&mut grads[*row], tr.shape(), &d);
                }
            }
            Op::Scale { a, factor } => {
                let d: Vec<f64> = gd.iter().map(|x| x * factor).collect();
                accumulate(&mut grads[*a], nodes[*a].value.shape(), &d);
            }
            Op::AddScalar { a } => {
                accumulate(&mut grads[*a], nodes[*a].value.shape(), gd);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = out.dims("").unwrap();
                let y = out.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        d[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(&mut grads[*a], nodes[*a].value.shape(), &d);
            }
            Op::LayerNorm { a, inv_std } => {
                let (m, n) = out.dims("").unwrap();
                let xhat = out.data();
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    let xr = &xhat[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        d[r * n + c] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                    }
                }
                accumulate(&mut grads[*a], nodes[*a].value.shape(), &d);
            }
            Op::Gelu { a } => {
                let x = nodes[*a].value.data();
                let d: Vec<f64> = gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect();
                accumulate(&mut grads[*a], nodes[*a].value.shape(), &d);
            }
            Op::Mean { a, axis } => {
                let ta = &nodes[*a].value;
                let (m, n) = ta.dims("").unwrap();
                let d = match axis {
                    Axis::Rows => {
                        let mut d = vec![0.0; m * n];
                        for r in 0..m {
                            for c in 0..n {
                                d[r * n + c] = gd[c] / m as f64;
                            }
                        }
                        d
                    }
                    Axis::Cols => {
                        let mut d = vec![0.0; m * n];
                        for r in 0..m {
                            for c in 0..n {
                                d[r * n + c] = gd[r] / n as f64;
                            }
                        }
                        d
                    }
                };
                accumulate(&mut grads[*a], ta.shape(), &d);
            }
            Op::Sum { a } => {
                let ta = &nodes[*a].value;
                let d = vec![gd[0]; ta.numel()];
                accumulate(&mut grads[*a], ta.shape(), &d);
            }
            Op::Slice { a, axis, start } => {
                let ta = &nodes[*a].value;
                let (m, n) = ta.dims("").unwrap();
                let (om, on) = out.dims("").unwrap();
                let mut d = vec![0.0; m * n];
                match axis {
                    Axis::Rows => d[start * n..(start + om) * n].copy_from_slice(gd),
                    Axis::Cols => {
                        for r in 0..m {
                            d[r * n + start..r * n + start + on].copy_from_slice(&gd[r * on..(r + 1) * on]);
                        }
                    }
                }
                accumulate(&mut grads[*a], ta.shape(), &d);
            }
            Op::Concat { parts, axis } => {
                let (m, total_cols) = out.dims("").unwrap();
                let mut offset = 0;
                for &p in parts {
                    let tp = &nodes[p].value;
                    let (pm, pn) = tp.dims("").unwrap();
                    if wants(p) {
                        let d: Vec<f64> = match axis {
                            Axis::Rows => gd[offset * pn..(offset + pm) * pn].to_vec(),
                            Axis::Cols => (0..m)
                                .flat_map(|r| gd[r * total_cols + offset..r * total_cols + offset + pn].iter().copied())
                                .collect(),
                        };
                        accumulate(&mut grads[p], tp.shape(), &d);
                    }
                    offset += if *axis == Axis::Rows { pm } else { pn };
                }
            }
            Op::GatherRows { a, index } => {
                let ta = &nodes[*a].value;
                let (m, n) = ta.dims("").unwrap();
                let mut d = vec![0.0; m * n];
                for (o, &i) in index.iter().enumerate() {
                    for c in 0..n {
                        d[i * n + c] += gd[o * n + c];
                    }
                }
                accumulate(&mut grads[*a], ta.shape(), &d);
            }
            Op::MseLoss { pred, target } => {
                let (tp, tt) = (&nodes[*pred].value, &nodes[*target].value);
                let scale = 2.0 * gd[0] / tp.numel() as f64;
                let diff: Vec<f64> = tp.data().iter().zip(tt.data()).map(|(p, t)| scale * (p - t)).collect();
                if wants(*pred) {
                    accumulate(&mut grads[*pred], tp.shape(), &diff);
                }
                if wants(*target) {
                    let neg: Vec<f64> = diff.iter().map(|x| -x).collect();
                    accumulate(&mut grads[*target], tt.shape(), &neg);
                }
            }
            Op::LogDet { a, inverse } => {
                let d: Vec<f64> = inverse.data().iter().map(|x| x * gd[0]).collect();
                accumulate(&mut grads[*a], nodes[*a].value.shape(), &d);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let tl = &nodes[*logits].value;
                let (m, n) = tl.dims("").unwrap();
                let scale = gd[0] / m as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * n + t] -= scale;
                }
                accumulate(&mut grads[*logits], tl.shape(), &d);
            }
        }
    }
}
