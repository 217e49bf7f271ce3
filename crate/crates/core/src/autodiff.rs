//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only Wengert list. Every builder method evaluates
//! its node immediately, so shape errors surface where the op is recorded.
//! Leaves can later be reassigned with [`Graph::set_value`] and the whole
//! list replayed with [`Graph::forward`]; attacks and the weight-perturbation
//! ascent reuse one graph across iterations this way.

use crate::error::{Error, Result};
use crate::tensor::{cofactor3, det3, DenseMatrix};

/// Squared-norm jitter used by row normalization.
pub const NORMALIZE_JITTER: f64 = 1e-12;

/// Floor applied to `|det|` before the square root in [`Graph::sqrt_abs_det3`].
pub const DET_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Mean cross-entropy of row-wise softmax against integer labels.
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    /// Row-wise `x / sqrt(|x|^2 + jitter)`.
    L2Normalize(NodeId),
    Mul(NodeId, NodeId),
    /// Sum of all entries, producing 1x1.
    Sum(NodeId),
    /// Per-row sum, producing n x 1.
    RowSum(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Per-row `sqrt(max(|det G|, floor))` where each row holds a row-major 3x3 `G`.
    SqrtAbsDet3(NodeId),
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op: OpKind,
    pub value: DenseMatrix,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<TapeNode>,
    grads: Vec<DenseMatrix>,
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

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to `id`.
    ///
    /// Nodes that do not require gradients report zeros.
    pub fn grad(&self, id: NodeId) -> &DenseMatrix {
        &self.grads[id.0]
    }

    pub fn leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.push(OpKind::Leaf, value, requires_grad)
    }

    pub fn param(&mut self, value: DenseMatrix) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.leaf(value, false)
    }

    /// Replaces a leaf's value. The shape must not change.
    pub fn set_value(&mut self, id: NodeId, value: DenseMatrix) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if node.op != OpKind::Leaf {
            return Err(Error::Contract(format!(
                "node {} is not a leaf and cannot be assigned",
                id.0
            )));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                lhs: node.value.shape(),
                rhs: value.shape(),
            });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: OpKind, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.nodes.push(TapeNode {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: OpKind) -> Result<NodeId> {
        let value = self.eval(&op)?;
        let requires_grad = self.inputs_require_grad(&op);
        Ok(self.push(op, value, requires_grad))
    }

    fn inputs_require_grad(&self, op: &OpKind) -> bool {
        let rg = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            OpKind::Leaf => false,
            OpKind::MatMul(a, b) | OpKind::Add(a, b) | OpKind::Mul(a, b) => rg(a) || rg(b),
            OpKind::Transpose(a)
            | OpKind::Scale(a, _)
            | OpKind::Relu(a)
            | OpKind::SoftmaxCrossEntropy(a, _)
            | OpKind::L2Normalize(a)
            | OpKind::Sum(a)
            | OpKind::RowSum(a)
            | OpKind::SqrtAbsDet3(a) => rg(a),
            OpKind::ConcatCols(parts) => parts.iter().any(rg),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.record(OpKind::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Relu(a))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.record(OpKind::SoftmaxCrossEntropy(logits, labels.to_vec()))
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::L2Normalize(a))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(OpKind::Mul(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::Sum(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::RowSum(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(OpKind::ConcatCols(parts.to_vec()))
    }

    pub fn sqrt_abs_det3(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(OpKind::SqrtAbsDet3(a))
    }

    /// Mean over all entries.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Input("mean of an empty matrix".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    fn eval(&self, op: &OpKind) -> Result<DenseMatrix> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let out = match op {
            OpKind::Leaf => unreachable!("leaves are never re-evaluated"),
            OpKind::MatMul(a, b) => v(a).matmul(v(b))?,
            OpKind::Transpose(a) => v(a).transpose(),
            OpKind::Add(a, b) => v(a).add(v(b))?,
            OpKind::Scale(a, s) => v(a).scale(*s),
            OpKind::Relu(a) => v(a).map(|x| x.max(0.0)),
            OpKind::SoftmaxCrossEntropy(a, labels) => {
                let logits = v(a);
                check_labels(logits, labels)?;
                let mut total = 0.0;
                for (i, &y) in labels.iter().enumerate() {
                    let row = logits.row(i);
                    total += log_sum_exp(row) - row[y];
                }
                DenseMatrix::scalar(total / labels.len() as f64)
            }
            OpKind::L2Normalize(a) => {
                let x = v(a);
                let mut out = x.clone();
                for r in 0..x.rows() {
                    let s = row_norm(x.row(r));
                    out.row_mut(r).iter_mut().for_each(|e| *e /= s);
                }
                out
            }
            OpKind::Mul(a, b) => v(a).hadamard(v(b))?,
            OpKind::Sum(a) => DenseMatrix::scalar(v(a).sum()),
            OpKind::RowSum(a) => {
                let x = v(a);
                let sums = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
                DenseMatrix::from_vec(x.rows(), 1, sums)?
            }
            OpKind::ConcatCols(parts) => {
                let first = parts
                    .first()
                    .ok_or_else(|| Error::Input("concat of zero matrices".into()))?;
                let rows = v(first).rows();
                let mut cols = 0;
                for p in parts {
                    if v(p).rows() != rows {
                        return Err(Error::Dimension {
                            op: "concat-cols",
                            lhs: v(first).shape(),
                            rhs: v(p).shape(),
                        });
                    }
                    cols += v(p).cols();
                }
                let mut out = DenseMatrix::zeros(rows, cols);
                for r in 0..rows {
                    let mut c0 = 0;
                    for p in parts {
                        let src = v(p).row(r);
                        out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                        c0 += src.len();
                    }
                }
                out
            }
            OpKind::SqrtAbsDet3(a) => {
                let g = v(a);
                if g.cols() != 9 {
                    return Err(Error::Dimension {
                        op: "sqrt-abs-det-3x3",
                        lhs: g.shape(),
                        rhs: (g.rows(), 9),
                    });
                }
                let vals = (0..g.rows())
                    .map(|r| det3(g.row(r)).abs().max(DET_FLOOR).sqrt())
                    .collect();
                DenseMatrix::from_vec(g.rows(), 1, vals)?
            }
        };
        if !out.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {}",
                op_name(op)
            )));
        }
        Ok(out)
    }

    /// Re-evaluates every recorded op up to and including `root` from the
    /// current leaf values and returns the root value.
    pub fn forward(&mut self, root: NodeId) -> Result<&DenseMatrix> {
        for i in 0..=root.0 {
            if self.nodes[i].op == OpKind::Leaf {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(&self.nodes[root.0].value)
    }

    /// Accumulates d(root)/d(node) into every node that requires gradients.
    ///
    /// All gradient buffers are reset to zero first; `root` must be 1x1.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward root must be scalar, found shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| DenseMatrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        self.grads[root.0] = DenseMatrix::scalar(1.0);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].op == OpKind::Leaf {
                continue;
            }
            let upstream = std::mem::replace(&mut self.grads[i], DenseMatrix::zeros(0, 0));
            self.propagate(i, &upstream)?;
            self.grads[i] = upstream;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &DenseMatrix) -> Result<()> {
        if self.nodes[id.0].requires_grad {
            self.grads[id.0].add_assign(delta)?;
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &DenseMatrix) -> Result<()> {
        let op = self.nodes[i].op.clone();
        match op {
            OpKind::Leaf => {}
            OpKind::MatMul(a, b) => {
                if self.wants(a) {
                    let d = g.matmul(&self.value(b).transpose())?;
                    self.accumulate(a, &d)?;
                }
                if self.wants(b) {
                    let d = self.value(a).transpose().matmul(g)?;
                    self.accumulate(b, &d)?;
                }
            }
            OpKind::Transpose(a) => self.accumulate(a, &g.transpose())?,
            OpKind::Add(a, b) => {
                self.accumulate(a, g)?;
                self.accumulate(b, g)?;
            }
            OpKind::Scale(a, s) => self.accumulate(a, &g.scale(s))?,
            OpKind::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(a, &g.hadamard(&mask)?)?;
            }
            OpKind::SoftmaxCrossEntropy(a, labels) => {
                let up = g.item()?;
                let logits = self.value(a);
                let n = labels.len() as f64;
                let mut d = DenseMatrix::zeros(logits.rows(), logits.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let row = logits.row(r);
                    let lse = log_sum_exp(row);
                    let out = d.row_mut(r);
                    for (o, &z) in out.iter_mut().zip(row) {
                        *o = (z - lse).exp() * up / n;
                    }
                    out[y] -= up / n;
                }
                self.accumulate(a, &d)?;
            }
            OpKind::L2Normalize(a) => {
                let x = self.value(a);
                let mut d = DenseMatrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let gr = g.row(r);
                    let s = row_norm(xr);
                    let xg: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    let s3 = s * s * s;
                    for ((o, &xi), &gi) in d.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *o = gi / s - xi * xg / s3;
                    }
                }
                self.accumulate(a, &d)?;
            }
            OpKind::Mul(a, b) => {
                if self.wants(a) {
                    let d = g.hadamard(self.value(b))?;
                    self.accumulate(a, &d)?;
                }
                if self.wants(b) {
                    let d = g.hadamard(self.value(a))?;
                    self.accumulate(b, &d)?;
                }
            }
            OpKind::Sum(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(a, &DenseMatrix::filled(r, c, g.item()?))?;
            }
            OpKind::RowSum(a) => {
                let (r, c) = self.value(a).shape();
                let mut d = DenseMatrix::zeros(r, c);
                for row in 0..r {
                    let gv = g.get(row, 0);
                    d.row_mut(row).iter_mut().for_each(|e| *e = gv);
                }
                self.accumulate(a, &d)?;
            }
            OpKind::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.wants(p) {
                        let mut d = DenseMatrix::zeros(r, c);
                        for row in 0..r {
                            d.row_mut(row).copy_from_slice(&g.row(row)[c0..c0 + c]);
                        }
                        self.accumulate(p, &d)?;
                    }
                    c0 += c;
                }
            }
            OpKind::SqrtAbsDet3(a) => {
                let m = self.value(a);
                let mut d = DenseMatrix::zeros(m.rows(), 9);
                for r in 0..m.rows() {
                    let row = m.row(r);
                    let det = det3(row);
                    if det.abs() <= DET_FLOOR {
                        continue;
                    }
                    let f = det.abs().sqrt();
                    let coef = g.get(r, 0) * det.signum() / (2.0 * f);
                    let cof = cofactor3(row);
                    for (o, c) in d.row_mut(r).iter_mut().zip(cof) {
                        *o = coef * c;
                    }
                }
                self.accumulate(a, &d)?;
            }
        }
        Ok(())
    }
}

fn check_labels(logits: &DenseMatrix, labels: &[usize]) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Dimension {
            op: "softmax-cross-entropy",
            lhs: logits.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::Input("cross-entropy over an empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

fn row_norm(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() + NORMALIZE_JITTER).sqrt()
}

fn op_name(op: &OpKind) -> &'static str {
    match op {
        OpKind::Leaf => "leaf",
        OpKind::MatMul(..) => "matmul",
        OpKind::Transpose(..) => "transpose",
        OpKind::Add(..) => "add",
        OpKind::Scale(..) => "scale",
        OpKind::Relu(..) => "relu",
        OpKind::SoftmaxCrossEntropy(..) => "softmax-cross-entropy",
        OpKind::L2Normalize(..) => "l2-normalize",
        OpKind::Mul(..) => "elementwise-mul",
        OpKind::Sum(..) => "sum",
        OpKind::RowSum(..) => "row-sum",
        OpKind::ConcatCols(..) => "concat-cols",
        OpKind::SqrtAbsDet3(..) => "sqrt-abs-det-3x3",
    }
}
