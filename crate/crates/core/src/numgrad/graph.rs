use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul, matmul_a_bt_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};

/// Named tensors, ordered by name so iteration is deterministic.
pub type Bindings = BTreeMap<String, Tensor>;

/// Gradients keyed by leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Source of leaf values for [`Graph::forward`].
pub trait Bind {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bind for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bind for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// Exposes `inner` under names carrying `prefix`.
pub struct Prefixed<'a> {
    pub prefix: &'a str,
    pub inner: &'a dyn Bind,
}

impl Bind for Prefixed<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        name.strip_prefix(self.prefix)
            .and_then(|rest| self.inner.lookup(rest))
    }
}

/// Several binding sources; the first one that knows a name wins.
pub struct Layers<'a>(pub Vec<&'a dyn Bind>);

impl Bind for Layers<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find_map(|b| b.lookup(name))
    }
}

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Const(Tensor),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64, shift: f64 },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Concat { parts: Vec<usize>, axis: Axis },
    SliceCols { x: usize, start: usize, end: usize },
    GatherRows { table: usize, ids: Vec<usize> },
    RepeatRows { x: usize, times: usize },
    ReduceMean(usize),
    Sum(Vec<usize>),
    SquaredL2 { a: usize, b: usize, weights: Option<Vec<f64>> },
    L1 { a: usize, b: usize, weights: Option<Vec<f64>> },
    SoftmaxXent { logits: usize, labels: Vec<usize>, weights: Option<Vec<f64>> },
    KlSoftmax { target: usize, logits: usize, weights: Option<Vec<f64>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::ReduceMean(_) => "reduce_mean",
            Op::Sum(_) => "sum",
            Op::SquaredL2 { .. } => "squared_l2",
            Op::L1 { .. } => "l1",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::KlSoftmax { .. } => "kl_softmax",
        }
    }
}

/// A statically built computation over the fixed primitive-op vocabulary.
///
/// Nodes are appended in topological order (an op can only reference
/// nodes that already exist). [`Graph::forward`] evaluates and caches every
/// node up to the requested output; [`Graph::backward`] then walks the same
/// nodes once in reverse and returns gradients for every named leaf.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Option<Tensor>>,
    output: Option<usize>,
    visit_order: Vec<usize>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.ops.push(op);
        self.output = None;
        NodeId(self.ops.len() - 1)
    }

    /// Named leaf, bound at forward time. Gradients are reported for it.
    pub fn leaf(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf(name.into()))
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a.0, b.0))
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a.0, b.0))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { x: x.0, scale, shift })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.affine(x, c, 0.0)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x.0))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x.0))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> NodeId {
        self.push(Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            axis,
        })
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols { x: x.0, start, end })
    }

    /// Row lookup into `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows { table: table.0, ids })
    }

    /// Tiles a single-row tensor `times` times.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        self.push(Op::RepeatRows { x: x.0, times })
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::ReduceMean(x.0))
    }

    /// Sum of same-shaped tensors.
    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::Sum(xs.iter().map(|x| x.0).collect()))
    }

    /// `sum_r w_r * ||a_r - b_r||_2^2` (all weights 1 when `None`).
    pub fn squared_l2(&mut self, a: NodeId, b: NodeId, weights: Option<Vec<f64>>) -> NodeId {
        self.push(Op::SquaredL2 { a: a.0, b: b.0, weights })
    }

    /// `sum_r w_r * ||a_r - b_r||_1`.
    pub fn l1(&mut self, a: NodeId, b: NodeId, weights: Option<Vec<f64>>) -> NodeId {
        self.push(Op::L1 { a: a.0, b: b.0, weights })
    }

    /// `sum_r w_r * (-log softmax(logits_r)[label_r])`.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
    ) -> NodeId {
        self.push(Op::SoftmaxXent { logits: logits.0, labels, weights })
    }

    /// `sum_r w_r * KL(softmax(target_r) || softmax(logits_r))`.
    pub fn kl_softmax(
        &mut self,
        target: NodeId,
        logits: NodeId,
        weights: Option<Vec<f64>>,
    ) -> NodeId {
        self.push(Op::KlSoftmax { target: target.0, logits: logits.0, weights })
    }

    /// Cached value of a node from the last forward pass.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0).and_then(Option::as_ref)
    }

    /// Nodes visited by the last backward pass, in visiting order.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.visit_order
    }

    /// Evaluates every node up to `output` and caches the intermediates.
    pub fn forward(&mut self, output: NodeId, bindings: &dyn Bind) -> Result<Tensor> {
        let out = output.0;
        if out >= self.ops.len() {
            return Err(Error::Shape(format!("output node {out} does not exist")));
        }
        self.values.clear();
        self.values.resize(out + 1, None);
        for i in 0..=out {
            let v = self.eval_node(i, bindings)?;
            self.values[i] = Some(v);
        }
        self.output = Some(out);
        Ok(self.values[out].clone().expect("just computed"))
    }

    fn val(&self, i: usize) -> &Tensor {
        self.values[i].as_ref().expect("inputs evaluated before use")
    }

    fn mismatch(&self, node: usize, detail: String) -> Error {
        Error::ShapeMismatch {
            node,
            op: self.ops[node].name(),
            detail,
        }
    }

    fn check_weights(&self, node: usize, w: &Option<Vec<f64>>, rows: usize) -> Result<()> {
        match w {
            Some(w) if w.len() != rows => Err(self.mismatch(
                node,
                format!("{} row weights for {rows} rows", w.len()),
            )),
            _ => Ok(()),
        }
    }

    fn eval_node(&self, i: usize, bindings: &dyn Bind) -> Result<Tensor> {
        let op = &self.ops[i];
        let t = match op {
            Op::Leaf(name) => bindings
                .lookup(name)
                .cloned()
                .ok_or_else(|| Error::UnboundLeaf(name.clone()))?,
            Op::Const(t) => t.clone(),
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                if ta.cols() != tb.rows() {
                    return Err(self.mismatch(
                        i,
                        format!("{:?} x {:?}", ta.shape(), tb.shape()),
                    ));
                }
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                Tensor::raw(vec![m, n], matmul(ta.data(), m, k, tb.data(), n))
            }
            &Op::Add(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                if ta.same_matrix_shape(tb) {
                    let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
                    Tensor::raw(ta.shape().to_vec(), data)
                } else if tb.rows() == 1 && tb.cols() == ta.cols() {
                    let c = ta.cols();
                    let data = ta
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(j, x)| x + tb.data()[j % c])
                        .collect();
                    Tensor::raw(ta.shape().to_vec(), data)
                } else {
                    return Err(self.mismatch(
                        i,
                        format!("{:?} + {:?}", ta.shape(), tb.shape()),
                    ));
                }
            }
            &Op::Sub(a, b) | &Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                if !ta.same_matrix_shape(tb) {
                    return Err(self.mismatch(
                        i,
                        format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                    ));
                }
                let sub = matches!(op, Op::Sub(..));
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| if sub { x - y } else { x * y })
                    .collect();
                Tensor::raw(ta.shape().to_vec(), data)
            }
            &Op::Affine { x, scale, shift } => map(self.val(x), |v| scale * v + shift),
            &Op::Sigmoid(x) => map(self.val(x), sigmoid),
            &Op::Tanh(x) => map(self.val(x), f64::tanh),
            &Op::Relu(x) => map(self.val(x), |v| v.max(0.0)),
            Op::Concat { parts, axis } => {
                if parts.is_empty() {
                    return Err(self.mismatch(i, "no parts".into()));
                }
                let ts: Vec<&Tensor> = parts.iter().map(|&p| self.val(p)).collect();
                match axis {
                    Axis::Cols => {
                        let rows = ts[0].rows();
                        if ts.iter().any(|t| t.rows() != rows) {
                            return Err(self.mismatch(i, "row counts differ".into()));
                        }
                        let cols: usize = ts.iter().map(|t| t.cols()).sum();
                        let mut data = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            for t in &ts {
                                data.extend_from_slice(t.row(r));
                            }
                        }
                        Tensor::raw(vec![rows, cols], data)
                    }
                    Axis::Rows => {
                        let cols = ts[0].cols();
                        if ts.iter().any(|t| t.cols() != cols) {
                            return Err(self.mismatch(i, "column counts differ".into()));
                        }
                        let rows: usize = ts.iter().map(|t| t.rows()).sum();
                        let mut data = Vec::with_capacity(rows * cols);
                        for t in &ts {
                            data.extend_from_slice(t.data());
                        }
                        Tensor::raw(vec![rows, cols], data)
                    }
                }
            }
            &Op::SliceCols { x, start, end } => {
                let t = self.val(x);
                if start >= end || end > t.cols() {
                    return Err(self.mismatch(
                        i,
                        format!("columns {start}..{end} of {:?}", t.shape()),
                    ));
                }
                let w = end - start;
                let mut data = Vec::with_capacity(t.rows() * w);
                for r in 0..t.rows() {
                    data.extend_from_slice(&t.row(r)[start..end]);
                }
                Tensor::raw(vec![t.rows(), w], data)
            }
            Op::GatherRows { table, ids } => {
                let t = self.val(*table);
                if ids.is_empty() {
                    return Err(self.mismatch(i, "no ids".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows()) {
                    return Err(self.mismatch(
                        i,
                        format!("row {bad} of table with {} rows", t.rows()),
                    ));
                }
                let mut data = Vec::with_capacity(ids.len() * t.cols());
                for &id in ids {
                    data.extend_from_slice(t.row(id));
                }
                Tensor::raw(vec![ids.len(), t.cols()], data)
            }
            &Op::RepeatRows { x, times } => {
                let t = self.val(x);
                if t.rows() != 1 || times == 0 {
                    return Err(self.mismatch(
                        i,
                        format!("repeat {times}x of {:?}", t.shape()),
                    ));
                }
                let data = t.data().repeat(times);
                Tensor::raw(vec![times, t.cols()], data)
            }
            &Op::ReduceMean(x) => {
                let t = self.val(x);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Sum(xs) => {
                if xs.is_empty() {
                    return Err(self.mismatch(i, "no terms".into()));
                }
                let first = self.val(xs[0]);
                let mut acc = first.clone();
                for &x in &xs[1..] {
                    let t = self.val(x);
                    if !t.same_matrix_shape(first) {
                        return Err(self.mismatch(
                            i,
                            format!("{:?} vs {:?}", first.shape(), t.shape()),
                        ));
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                        *a += b;
                    }
                }
                acc
            }
            Op::SquaredL2 { a, b, weights } | Op::L1 { a, b, weights } => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if !ta.same_matrix_shape(tb) {
                    return Err(self.mismatch(
                        i,
                        format!("{:?} vs {:?}", ta.shape(), tb.shape()),
                    ));
                }
                self.check_weights(i, weights, ta.rows())?;
                let squared = matches!(op, Op::SquaredL2 { .. });
                let mut total = 0.0;
                for r in 0..ta.rows() {
                    let w = weights.as_ref().map_or(1.0, |w| w[r]);
                    if w == 0.0 {
                        continue;
                    }
                    let s: f64 = ta
                        .row(r)
                        .iter()
                        .zip(tb.row(r))
                        .map(|(x, y)| if squared { (x - y) * (x - y) } else { (x - y).abs() })
                        .sum();
                    total += w * s;
                }
                Tensor::scalar(total)
            }
            Op::SoftmaxXent { logits, labels, weights } => {
                let t = self.val(*logits);
                if labels.len() != t.rows() {
                    return Err(self.mismatch(
                        i,
                        format!("{} labels for {} rows", labels.len(), t.rows()),
                    ));
                }
                self.check_weights(i, weights, t.rows())?;
                let mut total = 0.0;
                for (r, &label) in labels.iter().enumerate() {
                    if label >= t.cols() {
                        return Err(Error::LabelOutOfRange { label, classes: t.cols() });
                    }
                    let w = weights.as_ref().map_or(1.0, |w| w[r]);
                    if w == 0.0 {
                        continue;
                    }
                    let row = t.row(r);
                    total += w * (log_sum_exp(row) - row[label]);
                }
                Tensor::scalar(total)
            }
            Op::KlSoftmax { target, logits, weights } => {
                let (tp, tq) = (self.val(*target), self.val(*logits));
                if !tp.same_matrix_shape(tq) {
                    return Err(self.mismatch(
                        i,
                        format!("{:?} vs {:?}", tp.shape(), tq.shape()),
                    ));
                }
                self.check_weights(i, weights, tp.rows())?;
                let mut total = 0.0;
                for r in 0..tp.rows() {
                    let w = weights.as_ref().map_or(1.0, |w| w[r]);
                    if w == 0.0 {
                        continue;
                    }
                    total += w * kl_row(tp.row(r), tq.row(r));
                }
                Tensor::scalar(total)
            }
        };
        Ok(t)
    }

    /// Reverse pass from the output of the last [`Graph::forward`], which
    /// must be a scalar. `seed` scales the output gradient.
    pub fn backward(&mut self, seed: f64) -> Result<Gradients> {
        let out = self.output.ok_or(Error::BackwardBeforeForward)?;
        let out_val = self.val(out);
        if !out_val.is_scalar() {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(Tensor::raw(out_val.shape().to_vec(), vec![seed]));
        let mut result = Gradients::new();
        let mut order = std::mem::take(&mut self.visit_order);
        order.clear();

        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            order.push(i);
            self.backprop_node(i, g, &mut grads, &mut result);
        }
        self.visit_order = order;

        // Leaves that never received gradient still get a zero entry.
        for (i, op) in self.ops[..=out].iter().enumerate() {
            if let Op::Leaf(name) = op {
                result
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(self.val(i).shape()));
            }
        }
        Ok(result)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        result: &mut Gradients,
    ) {
        match &self.ops[i] {
            Op::Leaf(name) => match result.get_mut(name) {
                Some(acc) => add_into(acc, &g),
                None => {
                    result.insert(name.clone(), g);
                }
            },
            Op::Const(_) => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; m * k];
                matmul_a_bt_acc(g.data(), m, n, tb.data(), k, &mut ga);
                let mut gb = vec![0.0; k * n];
                matmul_at_b_acc(ta.data(), m, k, g.data(), n, &mut gb);
                accumulate(grads, a, Tensor::raw(ta.shape().to_vec(), ga));
                accumulate(grads, b, Tensor::raw(tb.shape().to_vec(), gb));
            }
            &Op::Add(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                if ta.same_matrix_shape(tb) {
                    accumulate(grads, b, Tensor::raw(tb.shape().to_vec(), g.data().to_vec()));
                } else {
                    accumulate(grads, b, Tensor::raw(tb.shape().to_vec(), col_sums(&g)));
                }
                accumulate(grads, a, g);
            }
            &Op::Sub(a, b) => {
                let neg = map(&g, |v| -v);
                accumulate(grads, b, reshape_like(neg, self.val(b)));
                accumulate(grads, a, g);
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let ga = zip_map(&g, tb, |gv, bv| gv * bv);
                let gb = zip_map(&g, ta, |gv, av| gv * av);
                accumulate(grads, a, reshape_like(ga, ta));
                accumulate(grads, b, reshape_like(gb, tb));
            }
            &Op::Affine { x, scale, .. } => accumulate(grads, x, map(&g, |v| v * scale)),
            &Op::Sigmoid(x) => {
                let y = self.val(i);
                accumulate(grads, x, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            &Op::Tanh(x) => {
                let y = self.val(i);
                accumulate(grads, x, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            &Op::Relu(x) => {
                let xin = self.val(x);
                let gx = zip_map(&g, xin, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, x, reshape_like(gx, xin));
            }
            Op::Concat { parts, axis } => {
                let cols = g.cols();
                match axis {
                    Axis::Cols => {
                        let mut offset = 0;
                        for &p in parts {
                            let tp = self.val(p);
                            let w = tp.cols();
                            let mut data = Vec::with_capacity(tp.len());
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row(r)[offset..offset + w]);
                            }
                            offset += w;
                            accumulate(grads, p, Tensor::raw(tp.shape().to_vec(), data));
                        }
                    }
                    Axis::Rows => {
                        let mut offset = 0;
                        for &p in parts {
                            let tp = self.val(p);
                            let n = tp.rows() * cols;
                            let data = g.data()[offset..offset + n].to_vec();
                            offset += n;
                            accumulate(grads, p, Tensor::raw(tp.shape().to_vec(), data));
                        }
                    }
                }
            }
            &Op::SliceCols { x, start, end } => {
                let tx = self.val(x);
                let mut gx = Tensor::zeros(tx.shape());
                let c = tx.cols();
                for r in 0..tx.rows() {
                    gx.data_mut()[r * c + start..r * c + end].copy_from_slice(g.row(r));
                }
                accumulate(grads, x, gx);
            }
            Op::GatherRows { table, ids } => {
                let tt = self.val(*table);
                let c = tt.cols();
                let mut gt = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, src) in gt.data_mut()[id * c..(id + 1) * c].iter_mut().zip(g.row(r)) {
                        *dst += src;
                    }
                }
                accumulate(grads, *table, gt);
            }
            &Op::RepeatRows { x, .. } => {
                let tx = self.val(x);
                accumulate(grads, x, Tensor::raw(tx.shape().to_vec(), col_sums(&g)));
            }
            &Op::ReduceMean(x) => {
                let tx = self.val(x);
                let v = g.item() / tx.len() as f64;
                accumulate(grads, x, Tensor::raw(tx.shape().to_vec(), vec![v; tx.len()]));
            }
            Op::Sum(xs) => {
                for &x in xs {
                    accumulate(grads, x, g.clone());
                }
            }
            Op::SquaredL2 { a, b, weights } | Op::L1 { a, b, weights } => {
                let squared = matches!(self.ops[i], Op::SquaredL2 { .. });
                let (ta, tb) = (self.val(*a), self.val(*b));
                let s = g.item();
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for r in 0..ta.rows() {
                    let w = weights.as_ref().map_or(1.0, |w| w[r]) * s;
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let d = ta.data()[r * c + j] - tb.data()[r * c + j];
                        ga[r * c + j] = if squared { 2.0 * w * d } else { w * sign(d) };
                    }
                }
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                accumulate(grads, *a, Tensor::raw(ta.shape().to_vec(), ga));
                accumulate(grads, *b, Tensor::raw(tb.shape().to_vec(), gb));
            }
            Op::SoftmaxXent { logits, labels, weights } => {
                let t = self.val(*logits);
                let s = g.item();
                let c = t.cols();
                let mut gl = vec![0.0; t.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let w = weights.as_ref().map_or(1.0, |w| w[r]) * s;
                    if w == 0.0 {
                        continue;
                    }
                    let p = softmax(t.row(r));
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        gl[r * c + j] = w * (p[j] - onehot);
                    }
                }
                accumulate(grads, *logits, Tensor::raw(t.shape().to_vec(), gl));
            }
            Op::KlSoftmax { target, logits, weights } => {
                let (tp, tq) = (self.val(*target), self.val(*logits));
                let s = g.item();
                let c = tp.cols();
                let mut gp = vec![0.0; tp.len()];
                let mut gq = vec![0.0; tq.len()];
                for r in 0..tp.rows() {
                    let w = weights.as_ref().map_or(1.0, |w| w[r]) * s;
                    if w == 0.0 {
                        continue;
                    }
                    let lp = log_softmax(tp.row(r));
                    let lq = log_softmax(tq.row(r));
                    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
                    for j in 0..c {
                        let p = lp[j].exp();
                        gq[r * c + j] = w * (lq[j].exp() - p);
                        gp[r * c + j] = w * p * ((lp[j] - lq[j]) - kl);
                    }
                }
                accumulate(grads, *target, Tensor::raw(tp.shape().to_vec(), gp));
                accumulate(grads, *logits, Tensor::raw(tq.shape().to_vec(), gq));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(acc) => add_into(acc, &g),
        slot @ None => *slot = Some(g),
    }
}

fn add_into(acc: &mut Tensor, g: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::raw(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn reshape_like(t: Tensor, like: &Tensor) -> Tensor {
    Tensor::raw(like.shape().to_vec(), t.into_data())
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut out = vec![0.0; c];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

pub(crate) fn kl_row(target_logits: &[f64], logits: &[f64]) -> f64 {
    let lp = log_softmax(target_logits);
    let lq = log_softmax(logits);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}
