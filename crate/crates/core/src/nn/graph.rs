//! Append-only computation graph with reverse-mode gradients.
//!
//! Every op evaluates eagerly when it is appended, so a node's value is
//! available immediately. Nodes only ever reference earlier nodes, which makes
//! the node list a topological order and lets `backward` walk it in reverse.
//!
//! Second derivatives are not produced by `backward` itself. Instead, callers
//! that need a differentiable gradient (the gradient penalty) build that
//! gradient out of ordinary ops, see [`crate::nn::Mlp::input_gradient`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::NnError;
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => libm::tanh(x),
        }
    }

    /// Derivative at pre-activation `x`, given the activated value `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    /// Piecewise-linear activations have a locally constant derivative.
    pub fn is_piecewise_linear(self) -> bool {
        !matches!(self, Activation::Tanh)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::LeakyRelu(_) => "leaky_relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    AddRowBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Act(NodeId, Activation),
    Abs(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowNorm(NodeId),
    NormalizeRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
    LogMeanExp(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(t) => t,
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Whether any gradient reached `id`.
    pub fn touched(&self, id: NodeId) -> bool {
        self.grads[id.0].is_some()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn checked(op: &'static str, t: Tensor) -> Result<Tensor, NnError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(NnError::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(op, value, needs)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims()
    }

    /// Differentiable input (parameter or data that needs a gradient).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        if k != k2 {
            return Err(NnError::shape("matmul", format!("({n}x{k}) * ({k2}x{m})")));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let v = checked("matmul", Tensor::matrix(n, m, out))?;
        Ok(self.push_op(Op::MatMul(a, b), v, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let v = self.value(a).transpose();
        Ok(self.push_op(Op::Transpose(a), v, &[a]))
    }

    /// `a (n x m) + bias (1 x m)` broadcast over rows.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let (n, m) = self.dims(a);
        if self.dims(bias) != (1, m) {
            return Err(NnError::shape(
                "add_row_bias",
                format!("({n}x{m}) + {:?}", self.dims(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let v = checked("add_row_bias", Tensor::matrix(n, m, out))?;
        Ok(self.push_op(Op::AddRowBias(a, bias), v, &[a, bias]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NnError> {
        if self.dims(a) != self.dims(b) {
            return Err(NnError::shape(
                name,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let (n, m) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        checked(name, Tensor::matrix(n, m, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(Op::Sub(a, b), v, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NnError> {
        let v = checked("scale", self.value(a).map(|x| x * c))?;
        Ok(self.push_op(Op::Scale(a, c), v, &[a]))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, NnError> {
        let v = checked("add_scalar", self.value(a).map(|x| x + c))?;
        Ok(self.push_op(Op::AddScalar(a), v, &[a]))
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> Result<NodeId, NnError> {
        if act == Activation::Linear {
            return Ok(a);
        }
        let v = checked("activation", self.value(a).map(|x| act.apply(x)))?;
        Ok(self.push_op(Op::Act(a, act), v, &[a]))
    }

    /// `|a|`; the derivative at exactly zero is taken as +1 so that an
    /// output starting at zero can still move.
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let v = self.value(a).map(libm::fabs);
        Ok(self.push_op(Op::Abs(a), v, &[a]))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let v = checked("exp", self.value(a).map(libm::exp))?;
        Ok(self.push_op(Op::Exp(a), v, &[a]))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let v = checked("square", self.value(a).map(|x| x * x))?;
        Ok(self.push_op(Op::Square(a), v, &[a]))
    }

    /// Sum of all entries, as `1x1`.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let v = checked("sum", Tensor::scalar(self.value(a).sum()))?;
        Ok(self.push_op(Op::Sum(a), v, &[a]))
    }

    /// Mean of all entries, as `1x1`.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let t = self.value(a);
        let v = checked("mean", Tensor::scalar(t.sum() / t.len() as f64))?;
        Ok(self.push_op(Op::Mean(a), v, &[a]))
    }

    /// Euclidean norm of each row, `n x 1`.
    pub fn row_norm(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let (n, _) = self.dims(a);
        let t = self.value(a);
        let data = (0..n).map(|r| crate::tensor::norm(t.row_slice(r))).collect();
        let v = checked("row_norm", Tensor::matrix(n, 1, data))?;
        Ok(self.push_op(Op::RowNorm(a), v, &[a]))
    }

    /// Each row scaled to unit norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let (n, m) = self.dims(a);
        let t = self.value(a);
        let mut out = t.data().to_vec();
        for r in 0..n {
            let nr = crate::tensor::norm(t.row_slice(r));
            if nr > 0.0 {
                for x in &mut out[r * m..(r + 1) * m] {
                    *x /= nr;
                }
            }
        }
        let v = checked("normalize_rows", Tensor::matrix(n, m, out))?;
        Ok(self.push_op(Op::NormalizeRows(a), v, &[a]))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (n, p) = self.dims(a);
        let (n2, q) = self.dims(b);
        if n != n2 {
            return Err(NnError::shape("concat_cols", format!("rows {n} vs {n2}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(ta.row_slice(r));
            out.extend_from_slice(tb.row_slice(r));
        }
        let v = Tensor::matrix(n, p + q, out);
        Ok(self.push_op(Op::ConcatCols(a, b), v, &[a, b]))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, NnError> {
        let (n, m) = self.dims(a);
        if start >= end || end > m {
            return Err(NnError::shape("slice_cols", format!("{start}..{end} of {m} columns")));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let v = Tensor::matrix(n, end - start, out);
        Ok(self.push_op(Op::SliceCols(a, start), v, &[a]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NnError> {
        let (n, k) = self.dims(logits);
        if labels.len() != n {
            return Err(NnError::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NnError::shape(
                "softmax_cross_entropy",
                format!("label {bad} outside {k} classes"),
            ));
        }
        let t = self.value(logits);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = t.row_slice(r);
            total += log_sum_exp(row) - row[label];
        }
        let v = checked("softmax_cross_entropy", Tensor::scalar(total / n as f64))?;
        Ok(self.push_op(Op::SoftmaxCrossEntropy(logits, labels.to_vec()), v, &[logits]))
    }

    /// `log(mean(exp(a)))` over all entries, evaluated in log-sum-exp form.
    pub fn log_mean_exp(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let t = self.value(a);
        let v = log_sum_exp(t.data()) - libm::log(t.len() as f64);
        let v = checked("log_mean_exp", Tensor::scalar(v))?;
        Ok(self.push_op(Op::LogMeanExp(a), v, &[a]))
    }

    /// Reverse-mode gradients of the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NnError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(NnError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.dims()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NnError> {
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let (_, m) = self.dims(*b);
                if needs(*a) {
                    let mut da = vec![0.0; n * k];
                    matmul_a_bt_acc(g.data(), self.value(*b).data(), &mut da, n, m, k);
                    self.accumulate(grads, *a, Tensor::matrix(n, k, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * m];
                    matmul_at_b_acc(self.value(*a).data(), g.data(), &mut db, n, k, m);
                    self.accumulate(grads, *b, Tensor::matrix(k, m, db));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if needs(*bias) {
                    let (_, m) = g.dims();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::matrix(1, m, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    self.accumulate(grads, *a, zip(g, self.value(*b), |x, y| x * y));
                }
                if needs(*b) {
                    self.accumulate(grads, *b, zip(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Act(a, act) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(out.data()))
                    .map(|(&gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *a, Tensor::matrix(g.rows(), g.cols(), data));
            }
            Op::Abs(a) => {
                let d = zip(g, self.value(*a), |gv, x| {
                    if x < 0.0 {
                        -gv
                    } else {
                        gv
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip(g, out, |gv, y| gv * y)),
            Op::Square(a) => self.accumulate(grads, *a, zip(g, self.value(*a), |gv, x| 2.0 * gv * x)),
            Op::Sum(a) => {
                let (n, m) = self.dims(*a);
                self.accumulate(grads, *a, Tensor::filled(n, m, g.item()));
            }
            Op::Mean(a) => {
                let (n, m) = self.dims(*a);
                self.accumulate(grads, *a, Tensor::filled(n, m, g.item() / (n * m) as f64));
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let (n, m) = x.dims();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let nr = out.data()[r];
                    if nr > 0.0 {
                        let s = g.data()[r] / nr;
                        for (dv, xv) in d[r * m..(r + 1) * m].iter_mut().zip(x.row_slice(r)) {
                            *dv = s * xv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(n, m, d));
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let (n, m) = x.dims();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    let nr = crate::tensor::norm(x.row_slice(r));
                    if nr > 0.0 {
                        let y = out.row_slice(r);
                        let gr = g.row_slice(r);
                        let proj = crate::tensor::dot(gr, y);
                        for j in 0..m {
                            d[r * m + j] = (gr[j] - y[j] * proj) / nr;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(n, m, d));
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = self.dims(*a);
                let (_, q) = self.dims(*b);
                let mut da = Vec::with_capacity(n * p);
                let mut db = Vec::with_capacity(n * q);
                for r in 0..n {
                    let row = g.row_slice(r);
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                self.accumulate(grads, *a, Tensor::matrix(n, p, da));
                self.accumulate(grads, *b, Tensor::matrix(n, q, db));
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.dims(*a);
                let w = g.cols();
                let mut d = vec![0.0; n * m];
                for r in 0..n {
                    d[r * m + start..r * m + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, Tensor::matrix(n, m, d));
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let x = self.value(*logits);
                let (n, k) = x.dims();
                let scale = g.item() / n as f64;
                let mut d = vec![0.0; n * k];
                for (r, &label) in labels.iter().enumerate() {
                    let row = x.row_slice(r);
                    let lse = log_sum_exp(row);
                    for j in 0..k {
                        d[r * k + j] = libm::exp(row[j] - lse) * scale;
                    }
                    d[r * k + label] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::matrix(n, k, d));
            }
            Op::LogMeanExp(a) => {
                let x = self.value(*a);
                let lse = log_sum_exp(x.data());
                let gv = g.item();
                let d = x.map(|v| libm::exp(v - lse) * gv);
                self.accumulate(grads, *a, d);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(xs.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_scalar() {
        // y = w * x, loss = y^2
        let mut g = Graph::new();
        let w = g.leaf(Tensor::scalar(2.0));
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.matmul(w, x).unwrap();
        let loss = g.square(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).item(), 36.0);
    }

    #[test]
    fn untouched_leaf_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::matrix(1, 2, alloc::vec![1.0, 2.0]));
        let x = g.leaf(Tensor::scalar(3.0));
        let loss = g.square(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(!grads.touched(w));
        assert_eq!(grads.get(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(w), Err(NnError::NonScalarLoss { .. })));
    }

    #[test]
    fn softmax_cross_entropy_of_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(2, 4));
        let loss = g.softmax_cross_entropy(logits, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - libm::log(4.0)).abs() < 1e-15);
        assert!(g.softmax_cross_entropy(logits, &[0, 4]).is_err());
    }

    #[test]
    fn log_mean_exp_does_not_overflow() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row(&[1000.0, 1000.0]));
        let v = g.log_mean_exp(a).unwrap();
        assert!((g.value(v).item() - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn overflowing_exp_is_reported() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1e4));
        assert_eq!(g.exp(a), Err(NnError::NonFinite { op: "exp" }));
    }
}
