use super::kernels::{self, axis_split, Broadcast};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// The primitive set. Index-valued auxiliaries (`TopK::indices`) are
/// recomputed on every forward and treated as constants by backward.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    /// `[.., M, K] · [K, N]` (shared right operand) or `[.., M, K] · [.., K, N]`.
    MatMul(Var, Var),
    /// Elementwise with the right operand broadcast to the left's shape.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Gelu(Var),
    /// Normalizes the last axis; no affine part.
    LayerNorm(Var),
    /// Softmax over the last axis.
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Sum {
        x: Var,
        axis: Option<usize>,
    },
    Mean {
        x: Var,
        axis: Option<usize>,
    },
    /// Population variance.
    Variance {
        x: Var,
        axis: Option<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        rows: Vec<usize>,
        total: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Swaps the last two axes.
    Transpose(Var),
    Reshape {
        x: Var,
        shape: Vec<usize>,
    },
    /// Mean cross-entropy of `[B, C]` logits against integer labels.
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    StopGrad(Var),
    /// Largest `k` entries of each last-axis row, descending, ties to the lower index.
    TopK {
        x: Var,
        k: usize,
        indices: Vec<usize>,
    },
    /// Gathers `k` given columns per row.
    TakeCols {
        x: Var,
        k: usize,
        indices: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm(_) => "layernorm",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Variance { .. } => "variance",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose(_) => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StopGrad(_) => "stop_grad",
            Op::TopK { .. } => "top_k",
            Op::TakeCols { .. } => "take_cols",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::LayerNorm(x)
            | Op::Softmax(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Transpose(x)
            | Op::StopGrad(x) => vec![*x],
            Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Variance { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterAddRows { x, .. }
            | Op::Slice { x, .. }
            | Op::Reshape { x, .. }
            | Op::TopK { x, .. }
            | Op::TakeCols { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf that requires them.
/// Leaves the root does not reach through differentiable paths have no entry.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Append-only computation graph. Nodes are evaluated when recorded, so the
/// node order is a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Replaces a leaf's value; a later [`Graph::forward`] propagates it.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::shape("set_leaf", format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, mut op: Op) -> Result<Var> {
        let idx = self.nodes.len();
        let value = eval(&mut op, &self.nodes, idx)?;
        let requires_grad = !matches!(op, Op::StopGrad(_)) && op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(idx))
    }

    /// Re-evaluates every interior node up to `root` in topological order
    /// from the current leaf values and returns the root value.
    pub fn forward(&mut self, root: Var) -> Result<Tensor> {
        self.replay(root, false)
    }

    /// Like [`Graph::forward`], but holds stop-gradient outputs and top-k
    /// selections at their recorded values: the function backward
    /// differentiates. Used by the finite-difference oracle.
    pub fn forward_frozen(&mut self, root: Var) -> Result<Tensor> {
        self.replay(root, true)
    }

    fn replay(&mut self, root: Var, frozen: bool) -> Result<Tensor> {
        for i in 0..=root.0 {
            match self.nodes[i].op {
                Op::Leaf => continue,
                Op::StopGrad(_) if frozen => continue,
                _ => {}
            }
            let mut op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = if let (true, Op::TopK { x, k, indices }) = (frozen, &op) {
                Ok(take_cols(&self.nodes[x.0].value, *k, indices))
            } else {
                eval(&mut op, &self.nodes, i)
            };
            self.nodes[i].op = op;
            self.nodes[i].value = res?;
        }
        Ok(self.nodes[root.0].value.clone())
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::NonScalarRoot(root_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::ones(root_val.shape()));
        let mut leaves: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaves[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
                let n = bv.shape()[bv.rank() - 1];
                let batches = av.numel() / (m * k);
                let shared = bv.rank() == 2;
                if self.wants(*a) {
                    let mut da = vec![0.0; av.numel()];
                    for t in 0..batches {
                        let boff = if shared { 0 } else { t * k * n };
                        kernels::matmul_nt_acc(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bv.data()[boff..boff + k * n],
                            &mut da[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    for t in 0..batches {
                        let boff = if shared { 0 } else { t * k * n };
                        kernels::matmul_tn_acc(
                            &av.data()[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            &mut db[boff..boff + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let bv = self.value(*b);
                    let plan = Broadcast::plan(out.shape(), bv.shape(), "add").expect("checked in forward");
                    let mut db = vec![0.0; bv.numel()];
                    for (idx, &gv) in gd.iter().enumerate() {
                        db[plan.index(idx)] += gv;
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let plan = Broadcast::plan(out.shape(), bv.shape(), "mul").expect("checked in forward");
                if self.wants(*a) {
                    let da = gd
                        .iter()
                        .enumerate()
                        .map(|(idx, &gv)| gv * bv.data()[plan.index(idx)])
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bv.numel()];
                    for (idx, (&gv, &x)) in gd.iter().zip(av.data()).enumerate() {
                        db[plan.index(idx)] += gv * x;
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::AddScalar(x, _) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| gv * kernels::gelu_grad(v))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::LayerNorm(x) => {
                let xv = self.value(*x);
                let (rows, cols) = xv.rows_cols();
                let mut d = vec![0.0; xv.numel()];
                let n = cols as f64;
                for r in 0..rows {
                    let xr = &xv.data()[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let (mean, var) = mean_var(xr);
                    let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
                    let mut g_mean = 0.0;
                    let mut gx_mean = 0.0;
                    for (&gv, &xval) in gr.iter().zip(xr) {
                        g_mean += gv;
                        gx_mean += gv * (xval - mean) * rstd;
                    }
                    g_mean /= n;
                    gx_mean /= n;
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * rstd;
                        d[r * cols + c] = rstd * (gr[c] - g_mean - xhat * gx_mean);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Softmax(x) => {
                let (rows, cols) = out.rows_cols();
                let y = out.data();
                let mut d = vec![0.0; out.numel()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: f64 = gd[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                    for c in s {
                        d[c] = y[c] * (gd[c] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let d = gd.iter().zip(xv.data()).map(|(&gv, &v)| gv / v).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Exp(x) => {
                let d = gd.iter().zip(out.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), d));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xv = self.value(*x);
                let (outer, len, inner) = match axis {
                    None => (1, xv.numel(), 1),
                    Some(ax) => axis_split(xv.shape(), *ax, "sum").expect("checked in forward"),
                };
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut d = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            d[(o * len + a) * inner + i] = gd[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Variance { x, axis } => {
                let xv = self.value(*x);
                let (outer, len, inner) = match axis {
                    None => (1, xv.numel(), 1),
                    Some(ax) => axis_split(xv.shape(), *ax, "variance").expect("checked in forward"),
                };
                let xd = xv.data();
                let mut d = vec![0.0; xv.numel()];
                let n = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let mean = (0..len).map(|a| xd[(o * len + a) * inner + i]).sum::<f64>() / n;
                        for a in 0..len {
                            let at = (o * len + a) * inner + i;
                            d[at] = gd[o * inner + i] * 2.0 * (xd[at] - mean) / n;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let width = xv.numel() / xv.shape()[0];
                let mut d = vec![0.0; xv.numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..width {
                        d[src * width + c] += gd[r * width + c];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::ScatterAddRows { x, rows, .. } => {
                let xv = self.value(*x);
                let width = xv.numel() / xv.shape()[0];
                let mut d = vec![0.0; xv.numel()];
                for (r, &dst) in rows.iter().enumerate() {
                    d[r * width..(r + 1) * width].copy_from_slice(&gd[dst * width..(dst + 1) * width]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis, "concat").expect("checked");
                let mut offset = 0;
                for x in xs {
                    let xv = self.value(*x);
                    let len = xv.shape()[*axis];
                    if self.wants(*x) {
                        let mut d = Vec::with_capacity(xv.numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let xv = self.value(*x);
                let (outer, len, inner) = axis_split(xv.shape(), *axis, "slice").expect("checked");
                let width = end - start;
                let mut d = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    d[dst..dst + width * inner].copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                let d = transpose_last2(gd, out.shape());
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Reshape { x, .. } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gd.to_vec()));
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.rows_cols();
                let scale = g.item() / rows as f64;
                let mut d = vec![0.0; lv.numel()];
                for (r, &label) in labels.iter().enumerate() {
                    let dst = &mut d[r * cols..(r + 1) * cols];
                    kernels::softmax_row(lv.row(r), dst);
                    dst[label] -= 1.0;
                    for v in dst.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::TopK { x, k, indices } | Op::TakeCols { x, k, indices } => {
                let xv = self.value(*x);
                let (rows, cols) = xv.rows_cols();
                let mut d = vec![0.0; xv.numel()];
                for r in 0..rows {
                    for j in 0..*k {
                        d[r * cols + indices[r * k + j]] += gd[r * k + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
        }
    }
}

pub(crate) const LAYERNORM_EPS: f64 = 1e-6;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batches = data.len() / (m * n);
    let mut out = vec![0.0; data.len()];
    for b in 0..batches {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = data[base + i * n + j];
            }
        }
    }
    out
}

fn reduced_shape(shape: &[usize], axis: Option<usize>) -> Vec<usize> {
    match axis {
        None => Vec::new(),
        Some(ax) => shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != ax)
            .map(|(_, &d)| d)
            .collect(),
    }
}

fn top_k_row(row: &[f64], k: usize, out: &mut Vec<usize>) {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps the lower index first on ties
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    out.extend_from_slice(&order[..k]);
}

fn eval(op: &mut Op, nodes: &[Node], idx: usize) -> Result<Tensor> {
    let val = |v: &Var| -> &Tensor { &nodes[v.0].value };
    let name = op.name();
    let out = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if av.rank() < 2 || bv.rank() < 2 {
                return Err(Error::shape(name, format!("{:?} · {:?}", av.shape(), bv.shape())));
            }
            let (m, k) = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
            let (k2, n) = (bv.shape()[bv.rank() - 2], bv.shape()[bv.rank() - 1]);
            let shared = bv.rank() == 2;
            if k != k2 || (!shared && av.shape()[..av.rank() - 2] != bv.shape()[..bv.rank() - 2]) {
                return Err(Error::shape(name, format!("{:?} · {:?}", av.shape(), bv.shape())));
            }
            let batches = av.numel() / (m * k);
            let mut c = vec![0.0; batches * m * n];
            for t in 0..batches {
                let boff = if shared { 0 } else { t * k * n };
                kernels::matmul_nn(
                    &av.data()[t * m * k..(t + 1) * m * k],
                    &bv.data()[boff..boff + k * n],
                    &mut c[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let mut shape = av.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            Tensor::from_parts(shape, c)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let plan = Broadcast::plan(av.shape(), bv.shape(), name)?;
            let is_add = matches!(op, Op::Add(..));
            let bd = bv.data();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let y = bd[plan.index(i)];
                    if is_add {
                        x + y
                    } else {
                        x * y
                    }
                })
                .collect();
            Tensor::from_parts(av.shape().to_vec(), data)
        }
        Op::Scale(x, c) => {
            let c = *c;
            val(x).map(|v| v * c)
        }
        Op::AddScalar(x, c) => {
            let c = *c;
            val(x).map(|v| v + c)
        }
        Op::Relu(x) => val(x).map(|v| v.max(0.0)),
        Op::Gelu(x) => val(x).map(kernels::gelu),
        Op::LayerNorm(x) => {
            let xv = val(x);
            let (rows, cols) = xv.rows_cols();
            let mut d = vec![0.0; xv.numel()];
            for r in 0..rows {
                let xr = xv.row(r);
                let (mean, var) = mean_var(xr);
                let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
                for c in 0..cols {
                    d[r * cols + c] = (xr[c] - mean) * rstd;
                }
            }
            Tensor::from_parts(xv.shape().to_vec(), d)
        }
        Op::Softmax(x) => {
            let xv = val(x);
            let (rows, cols) = xv.rows_cols();
            let mut d = vec![0.0; xv.numel()];
            for r in 0..rows {
                kernels::softmax_row(xv.row(r), &mut d[r * cols..(r + 1) * cols]);
            }
            Tensor::from_parts(xv.shape().to_vec(), d)
        }
        Op::Log(x) => val(x).map(f64::ln),
        Op::Exp(x) => val(x).map(f64::exp),
        Op::Sum { x, axis } | Op::Mean { x, axis } | Op::Variance { x, axis } => {
            let xv = val(x);
            let (outer, len, inner) = match axis {
                None => (1, xv.numel(), 1),
                Some(ax) => axis_split(xv.shape(), *ax, name)?,
            };
            let xd = xv.data();
            let mut d = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let it = (0..len).map(|a| xd[(o * len + a) * inner + i]);
                    d[o * inner + i] = match name {
                        "sum" => it.sum(),
                        "mean" => it.sum::<f64>() / len as f64,
                        _ => {
                            let col: Vec<f64> = it.collect();
                            mean_var(&col).1
                        }
                    };
                }
            }
            Tensor::from_parts(reduced_shape(xv.shape(), *axis), d)
        }
        Op::GatherRows { x, rows } => {
            let xv = val(x);
            if xv.rank() == 0 || rows.is_empty() {
                return Err(Error::shape(name, "needs a non-scalar input and at least one row"));
            }
            let n = xv.shape()[0];
            let width = xv.numel() / n;
            let mut d = Vec::with_capacity(rows.len() * width);
            for &r in rows.iter() {
                if r >= n {
                    return Err(Error::Index {
                        op: name,
                        index: r,
                        len: n,
                    });
                }
                d.extend_from_slice(&xv.data()[r * width..(r + 1) * width]);
            }
            let mut shape = xv.shape().to_vec();
            shape[0] = rows.len();
            Tensor::from_parts(shape, d)
        }
        Op::ScatterAddRows { x, rows, total } => {
            let xv = val(x);
            if xv.rank() == 0 || xv.shape()[0] != rows.len() {
                return Err(Error::shape(name, format!("{:?} with {} rows", xv.shape(), rows.len())));
            }
            let width = xv.numel() / rows.len();
            let mut d = vec![0.0; *total * width];
            for (r, &dst) in rows.iter().enumerate() {
                if dst >= *total {
                    return Err(Error::Index {
                        op: name,
                        index: dst,
                        len: *total,
                    });
                }
                for c in 0..width {
                    d[dst * width + c] += xv.data()[r * width + c];
                }
            }
            let mut shape = xv.shape().to_vec();
            shape[0] = *total;
            Tensor::from_parts(shape, d)
        }
        Op::Concat { xs, axis } => {
            let first = xs.first().ok_or_else(|| Error::shape(name, "no inputs"))?;
            let base = val(first).shape().to_vec();
            let (outer, _, inner) = axis_split(&base, *axis, name)?;
            let mut total = 0;
            for x in xs.iter() {
                let s = val(x).shape();
                let same_rank = s.len() == base.len();
                let compatible = same_rank && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !compatible {
                    return Err(Error::shape(name, format!("{s:?} vs {base:?} on axis {axis}")));
                }
                total += s[*axis];
            }
            let mut d = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in xs.iter() {
                    let xv = val(x);
                    let len = xv.shape()[*axis];
                    d.extend_from_slice(&xv.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[*axis] = total;
            Tensor::from_parts(shape, d)
        }
        Op::Slice { x, axis, start, end } => {
            let xv = val(x);
            let (outer, len, inner) = axis_split(xv.shape(), *axis, name)?;
            if start >= end || *end > len {
                return Err(Error::shape(name, format!("{start}..{end} of axis length {len}")));
            }
            let width = *end - *start;
            let mut d = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let s = (o * len + *start) * inner;
                d.extend_from_slice(&xv.data()[s..s + width * inner]);
            }
            let mut shape = xv.shape().to_vec();
            shape[*axis] = width;
            Tensor::from_parts(shape, d)
        }
        Op::Transpose(x) => {
            let xv = val(x);
            if xv.rank() < 2 {
                return Err(Error::shape(name, format!("rank {} input", xv.rank())));
            }
            let mut shape = xv.shape().to_vec();
            let r = shape.len();
            shape.swap(r - 2, r - 1);
            Tensor::from_parts(shape, transpose_last2(xv.data(), xv.shape()))
        }
        Op::Reshape { x, shape } => val(x).clone().reshaped(shape.clone())?,
        Op::CrossEntropy { logits, labels } => {
            let lv = val(logits);
            if lv.rank() != 2 || lv.shape()[0] != labels.len() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {} labels", lv.shape(), labels.len()),
                ));
            }
            let cols = lv.shape()[1];
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= cols {
                    return Err(Error::Index {
                        op: name,
                        index: label,
                        len: cols,
                    });
                }
                let row = lv.row(r);
                total += kernels::logsumexp_row(row) - row[label];
            }
            Tensor::scalar(total / labels.len() as f64)
        }
        Op::StopGrad(x) => val(x).clone(),
        Op::TopK { x, k, indices } => {
            let xv = val(x);
            let (rows, cols) = xv.rows_cols();
            if xv.rank() == 0 || *k == 0 || *k > cols {
                return Err(Error::shape(name, format!("k={k} for shape {:?}", xv.shape())));
            }
            indices.clear();
            for r in 0..rows {
                top_k_row(xv.row(r), *k, indices);
            }
            take_cols(xv, *k, indices)
        }
        Op::TakeCols { x, k, indices } => {
            let xv = val(x);
            let (rows, cols) = xv.rows_cols();
            if xv.rank() == 0 || indices.len() != rows * *k {
                return Err(Error::shape(
                    name,
                    format!("{} indices for {rows} rows × {k}", indices.len()),
                ));
            }
            if let Some(&bad) = indices.iter().find(|&&c| c >= cols) {
                return Err(Error::Index {
                    op: name,
                    index: bad,
                    len: cols,
                });
            }
            take_cols(xv, *k, indices)
        }
    };
    if !out.is_finite() {
        return Err(Error::NonFinite { node: idx, op: name });
    }
    Ok(out)
}

fn take_cols(xv: &Tensor, k: usize, indices: &[usize]) -> Tensor {
    let (rows, _) = xv.rows_cols();
    let data = (0..rows)
        .flat_map(|r| indices[r * k..(r + 1) * k].iter().map(move |&c| xv.row(r)[c]))
        .collect();
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Tensor::from_parts(shape, data)
}

/// Builder methods. Each records one primitive and evaluates it immediately.
impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        self.push(Op::LayerNorm(x))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Softmax(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum { x, axis: None })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Sum { x, axis: Some(axis) })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Mean { x, axis: None })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Mean { x, axis: Some(axis) })
    }

    pub fn variance(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Variance { x, axis: None })
    }

    pub fn variance_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Variance { x, axis: Some(axis) })
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows { x, rows })
    }

    pub fn scatter_add_rows(&mut self, x: Var, rows: Vec<usize>, total: usize) -> Result<Var> {
        self.push(Op::ScatterAddRows { x, rows, total })
    }

    pub fn concat(&mut self, xs: Vec<Var>, axis: usize) -> Result<Var> {
        self.push(Op::Concat { xs, axis })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice { x, axis, start, end })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Reshape { x, shape })
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, labels })
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.push(Op::StopGrad(x))
    }

    /// Returns the gathered values `[.., k]` and the selected column indices
    /// (row-major, `k` per row).
    pub fn top_k(&mut self, x: Var, k: usize) -> Result<(Var, Vec<usize>)> {
        let v = self.push(Op::TopK {
            x,
            k,
            indices: Vec::new(),
        })?;
        let Op::TopK { indices, .. } = &self.nodes[v.0].op else {
            unreachable!()
        };
        Ok((v, indices.clone()))
    }

    pub fn take_cols(&mut self, x: Var, k: usize, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::TakeCols { x, k, indices })
    }
}
