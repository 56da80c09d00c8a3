use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Norms below this are rejected by [`Graph::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
    },
    L2Normalize {
        input: NodeId,
        norms: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        picks: Vec<(usize, usize)>,
        softmax: Vec<f64>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Deliberate backward-pass corruptions, used to prove the gradient checker
/// actually catches broken derivatives.
#[doc(hidden)]
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct FaultInjection {
    pub tanh_backward: bool,
}

/// Tape of operations recorded during one forward pass.
///
/// Nodes are append-only, so parents always precede children and the
/// creation order is a valid topological order. A graph is built per
/// mini-batch and dropped after its gradients are collected.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, NodeId>,
    faults: FaultInjection,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_faults(faults: FaultInjection) -> Self {
        Self {
            faults,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_tag(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.tag()
    }

    /// Parents of `id` in argument order.
    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sigmoid(a) | Op::Tanh(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::SliceRows { input, .. } | Op::L2Normalize { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Constant input; receives a gradient but feeds nothing back.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Constant copy of `id`'s value with no link back to its producers.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let value = self.value(id).clone();
        self.leaf(value)
    }

    /// Trainable leaf bound to a parameter in `store`. Repeated calls for the
    /// same parameter return the same node so its gradient accumulates once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.shape(b).len() != 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`, the natural product for row-batched inputs against
    /// `[out × in]` weight matrices.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b)))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| c * x);
        self.push(value, Op::Scale(a, c))
    }

    /// Adds a `[n]` bias to every row of an `[m × n]` input.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2();
        let vb = self.value(bias);
        if vb.len() != n {
            return Err(Error::shape("add_bias", self.shape(a), vb.shape()));
        }
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, b) in data[r * n..(r + 1) * n].iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(a, bias)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Horizontal concatenation of inputs with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.value(first).dims2();
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Vertical stacking of inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = self.value(first).dims2();
        let mut data = Vec::new();
        for &p in parts {
            let (_, c) = self.value(p).dims2();
            if c != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start .. start + len` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = va.dims2();
        if len == 0 || start + len > rows {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} of a {rows}-row matrix",
                start + len
            )));
        }
        let value = Tensor::matrix(
            len,
            cols,
            va.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        Ok(self.push(value, Op::SliceRows { input: a, start }))
    }

    /// Scales every row (the last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (rows, cols) = va.dims2();
        let mut norms = Vec::with_capacity(rows);
        let mut data = va.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm >= NORM_FLOOR && norm.is_finite()) {
                return Err(Error::DegenerateVector { norm });
            }
            row.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2Normalize { input: a, norms }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean of `-log softmax(logits[row])[class]` over the `(row, class)`
    /// picks. Rows not picked contribute nothing.
    pub fn cross_entropy(&mut self, logits: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        if picks.is_empty() {
            return Err(Error::Contract(
                "cross_entropy needs at least one pick".into(),
            ));
        }
        let v = self.value(logits);
        let (rows, cols) = v.dims2();
        let mut softmax = vec![0.0; rows * cols];
        let mut log_z = vec![0.0; rows];
        for r in 0..rows {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            log_z[r] = max + z.ln();
            for (s, x) in softmax[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *s = (x - log_z[r]).exp();
            }
        }
        let mut total = 0.0;
        for &(r, c) in picks {
            if r >= rows {
                return Err(Error::Contract(format!("cross_entropy row {r} of {rows}")));
            }
            if c >= cols {
                return Err(Error::Label {
                    label: c,
                    num_classes: cols,
                });
            }
            total += log_z[r] - v.row(r)[c];
        }
        let loss = total / picks.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                picks: picks.to_vec(),
                softmax,
            },
        ))
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `id`, or
    /// `None` if `id` does not influence the root.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(id)))
    }

    /// Parameter nodes in this graph with their gradients.
    /// The parameter a node was created from, if any.
    pub fn param_id(&self, node: NodeId) -> Option<ParamId> {
        match self.nodes[node.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> + '_ {
        self.params
            .iter()
            .map(|(&pid, &node)| (pid, self.grad(node)))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Every call starts from zeroed gradients, so running it twice on the
    /// same graph yields identical results rather than doubling them.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for idx in (0..=root.0).rev() {
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream);
            self.grads[idx] = Some(upstream);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        let shape = self.nodes[id.0].value.shape().to_vec();
        let slot = self.grads[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
        f(slot.data_mut());
    }

    fn propagate(&mut self, idx: usize, up: &Tensor) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2();
                let (_, n) = self.value(b).dims2();
                // dA = dY · Bᵀ, dB = Aᵀ · dY
                let mut da = vec![0.0; m * k];
                gemm_nt(up.data(), self.value(b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                gemm_tn(self.value(a).data(), up.data(), &mut db, m, k, n);
                self.accumulate_with(a, |g| add_into(g, &da));
                self.accumulate_with(b, |g| add_into(g, &db));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2();
                let (n, _) = self.value(b).dims2();
                // Y = A Bᵀ: dA = dY · B, dB = dYᵀ · A
                let mut da = vec![0.0; m * k];
                gemm_nn(up.data(), self.value(b).data(), &mut da, m, n, k);
                let mut db = vec![0.0; n * k];
                gemm_tn(up.data(), self.value(a).data(), &mut db, m, n, k);
                self.accumulate_with(a, |g| add_into(g, &da));
                self.accumulate_with(b, |g| add_into(g, &db));
            }
            Op::Add(a, b) => {
                self.accumulate_with(a, |g| add_into(g, up.data()));
                self.accumulate_with(b, |g| add_into(g, up.data()));
            }
            Op::Sub(a, b) => {
                self.accumulate_with(a, |g| add_into(g, up.data()));
                self.accumulate_with(b, |g| {
                    g.iter_mut().zip(up.data()).for_each(|(x, u)| *x -= u)
                });
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = up
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(u, y)| u * y)
                    .collect();
                let db: Vec<f64> = up
                    .data()
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(u, x)| u * x)
                    .collect();
                self.accumulate_with(a, |g| add_into(g, &da));
                self.accumulate_with(b, |g| add_into(g, &db));
            }
            Op::Scale(a, c) => {
                self.accumulate_with(a, |g| {
                    g.iter_mut().zip(up.data()).for_each(|(x, u)| *x += c * u)
                });
            }
            Op::AddBias(a, bias) => {
                let (m, n) = up.dims2();
                self.accumulate_with(a, |g| add_into(g, up.data()));
                self.accumulate_with(bias, |g| {
                    for r in 0..m {
                        add_into(g, &up.data()[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[idx].value.data();
                let d: Vec<f64> = up
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(u, s)| u * s * (1.0 - s))
                    .collect();
                self.accumulate(a, Tensor::new(up.shape().to_vec(), d).expect("shape"));
            }
            Op::Tanh(a) => {
                let y = self.nodes[idx].value.data();
                let d: Vec<f64> = if self.faults.tanh_backward {
                    up.data()
                        .iter()
                        .zip(y)
                        .map(|(u, t)| u * (1.0 - t))
                        .collect()
                } else {
                    up.data()
                        .iter()
                        .zip(y)
                        .map(|(u, t)| u * (1.0 - t * t))
                        .collect()
                };
                self.accumulate(a, Tensor::new(up.shape().to_vec(), d).expect("shape"));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = up.dims2();
                let mut offset = 0;
                for p in parts {
                    let (_, c) = self.value(p).dims2();
                    self.accumulate_with(p, |g| {
                        for r in 0..rows {
                            let src = &up.data()[r * total + offset..r * total + offset + c];
                            add_into(&mut g[r * c..(r + 1) * c], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    self.accumulate_with(p, |g| add_into(g, &up.data()[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                let (_, cols) = up.dims2();
                let offset = start * cols;
                self.accumulate_with(input, |g| {
                    add_into(&mut g[offset..offset + up.len()], up.data())
                });
            }
            Op::L2Normalize { input, norms } => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = y.dims2();
                let mut d = vec![0.0; rows * cols];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let ur = &up.data()[r * cols..(r + 1) * cols];
                    let proj: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = (ur[c] - yr[c] * proj) / norm;
                    }
                }
                self.accumulate_with(input, |g| add_into(g, &d));
            }
            Op::Sum(a) => {
                let u = up.data()[0];
                self.accumulate_with(a, |g| g.iter_mut().for_each(|x| *x += u));
            }
            Op::Mean(a) => {
                let u = up.data()[0] / self.value(a).len() as f64;
                self.accumulate_with(a, |g| g.iter_mut().for_each(|x| *x += u));
            }
            Op::CrossEntropy {
                logits,
                picks,
                softmax,
            } => {
                let (_, cols) = self.value(logits).dims2();
                let w = up.data()[0] / picks.len() as f64;
                self.accumulate_with(logits, |g| {
                    for &(r, c) in &picks {
                        let row = &mut g[r * cols..(r + 1) * cols];
                        for (x, s) in row.iter_mut().zip(&softmax[r * cols..(r + 1) * cols]) {
                            *x += w * s;
                        }
                        row[c] -= w;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
