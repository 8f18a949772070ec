//! Base networks, the theta-conditioned meta-model and the state maps
//! between their hidden spaces.
//!
//! Recurrent models read token ids through their own input embedding table.
//! The residual family treats the mean token embedding of a sequence as its
//! single input vector and uses the block index as time.

mod cells;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use cells::CellKind;
pub(crate) use cells::{cell_param_shapes, residual_block_graph, BlockLeaves, CellLeaves};

use crate::error::{Error, Result};
use crate::numgrad::{Axis, Bind, Bindings, Graph, Layers, NodeId, Tensor};

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| { let z: f64 = StandardNormal.sample(rng); std * z })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}

fn check_shapes(params: &Bindings, expected: &[(String, Vec<usize>)]) -> Result<()> {
    for (name, shape) in expected {
        match params.get(name) {
            None => return Err(Error::Shape(format!("missing parameter `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// A padded batch of token sequences.
#[derive(Debug, Clone)]
pub struct SeqBatch {
    seqs: Vec<Vec<usize>>,
    max_len: usize,
}

impl SeqBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let seqs: Vec<Vec<usize>> = seqs.iter().map(|s| s.as_ref().to_vec()).collect();
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::EmptySequence);
        }
        let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        Ok(Self { seqs, max_len })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.seqs.iter().map(Vec::len).collect()
    }

    pub fn sequences(&self) -> &[Vec<usize>] {
        &self.seqs
    }

    /// Token ids at step `t`, padded with 0 past the end of a sequence.
    pub fn ids_at(&self, t: usize) -> Vec<usize> {
        self.seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect()
    }

    fn check_vocab(&self, vocab: usize) -> Result<()> {
        for s in &self.seqs {
            if let Some(&token) = s.iter().find(|&&tok| tok >= vocab) {
                return Err(Error::TokenOutOfRange { token, vocab });
            }
        }
        Ok(())
    }
}

/// Graph nodes produced by one batched rollout.
#[derive(Debug, Clone)]
pub struct RolloutNodes {
    /// Hidden state after every step (`[batch, hidden]` each).
    pub hidden: Vec<NodeId>,
    /// All hidden states stacked step-major: row `t * batch + b`.
    pub stacked: NodeId,
    /// Readout of `stacked` (`[steps * batch, classes]`).
    pub logits: NodeId,
}

/// Result of evaluating a batched rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: usize,
    pub batch: usize,
    /// Number of valid steps per sequence.
    pub lengths: Vec<usize>,
    pub hidden: Tensor,
    pub logits: Tensor,
}

impl Trajectory {
    fn from_graph(g: &Graph, nodes: &RolloutNodes, lengths: Vec<usize>) -> Self {
        let hidden = g.value(nodes.stacked).expect("forwarded").clone();
        let logits = g.value(nodes.logits).expect("forwarded").clone();
        Self {
            steps: nodes.hidden.len(),
            batch: lengths.len(),
            lengths,
            hidden,
            logits,
        }
    }

    /// Hidden state of sequence `b` after step `t` (0-based).
    pub fn hidden_at(&self, t: usize, b: usize) -> &[f64] {
        self.hidden.row(t * self.batch + b)
    }

    pub fn logits_at(&self, t: usize, b: usize) -> &[f64] {
        self.logits.row(t * self.batch + b)
    }

    pub fn final_logits(&self, b: usize) -> &[f64] {
        self.logits_at(self.lengths[b] - 1, b)
    }

    /// Argmax of the final-step logits of each sequence.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch).map(|b| argmax(self.final_logits(b))).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Shared rollout builder for base and meta networks.
#[allow(clippy::too_many_arguments)]
fn build_rollout(
    g: &mut Graph,
    kind: CellKind,
    prefix: &str,
    hidden: usize,
    blocks: usize,
    theta: Option<NodeId>,
    head: &str,
    batch: &SeqBatch,
) -> RolloutNodes {
    let n = batch.len();
    let embed = g.leaf(format!("{prefix}embed"));
    let cell = CellLeaves::new(g, kind, prefix, blocks, theta.is_some());
    let mut states = Vec::new();
    match &cell {
        CellLeaves::Residual { stem_w, stem_b, blocks, w_theta } => {
            // mean token embedding per sequence
            let mut ids = Vec::new();
            let total: usize = batch.lengths().iter().sum();
            let mut avg = vec![0.0; n * total];
            for (b, s) in batch.sequences().iter().enumerate() {
                for &tok in s {
                    avg[b * total + ids.len()] = 1.0 / s.len() as f64;
                    ids.push(tok);
                }
            }
            let rows = g.gather_rows(embed, ids);
            let avg = g.constant(Tensor::matrix(n, total, avg));
            let feats = g.matmul(avg, rows);
            let f = g.matmul(feats, *stem_w);
            let f = g.add(f, *stem_b);
            let mut f = g.relu(f);
            let theta_bias = match (theta, w_theta) {
                (Some(th), Some(w)) => Some(g.matmul(th, *w)),
                _ => None,
            };
            for block in blocks {
                f = residual_block_graph(g, block, theta_bias, f);
                states.push(f);
            }
        }
        _ => {
            let theta_rows = theta.map(|th| g.repeat_rows(th, n));
            let mut h = g.constant(Tensor::zeros(&[n, hidden]));
            for t in 0..batch.max_len() {
                let mut x = g.gather_rows(embed, batch.ids_at(t));
                if let Some(th) = theta_rows {
                    x = g.concat(&[th, x], Axis::Cols);
                }
                h = cell.step(g, x, h);
                states.push(h);
            }
        }
    }
    let stacked = if states.len() == 1 {
        states[0]
    } else {
        g.concat(&states, Axis::Rows)
    };
    let w = g.leaf(format!("{prefix}{head}.w"));
    let b = g.leaf(format!("{prefix}{head}.b"));
    let logits = g.matmul(stacked, w);
    let logits = g.add(logits, b);
    RolloutNodes { hidden: states, stacked, logits }
}

/// A trained (or trainable) network whose dynamics the meta-model emulates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub kind: CellKind,
    pub vocab_size: usize,
    /// Width of the token embedding fed to the cell.
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    /// Residual block count; 0 for recurrent cells.
    pub blocks: usize,
    pub task_group: usize,
    pub params: Bindings,
}

impl BaseModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: CellKind,
        vocab_size: usize,
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        blocks: usize,
        task_group: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if vocab_size == 0 || input_dim == 0 || hidden_dim == 0 || output_dim == 0 {
            return Err(Error::Shape("model dimensions must be positive".into()));
        }
        if kind == CellKind::ResidualMlp && blocks == 0 {
            return Err(Error::Shape("residual models need at least one block".into()));
        }
        let blocks = if kind.is_recurrent() { 0 } else { blocks };
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut params = Bindings::new();
        params.insert("embed".into(), normal(rng, &[vocab_size, input_dim], 1.0));
        for (name, shape) in cell_param_shapes(kind, input_dim, hidden_dim, blocks, 0) {
            params.insert(name, uniform(rng, &shape, bound));
        }
        params.insert("head.w".into(), uniform(rng, &[hidden_dim, output_dim], bound));
        params.insert("head.b".into(), uniform(rng, &[output_dim], bound));
        Ok(Self {
            kind,
            vocab_size,
            input_dim,
            hidden_dim,
            output_dim,
            blocks,
            task_group,
            params,
        })
    }

    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![("embed".to_string(), vec![self.vocab_size, self.input_dim])];
        v.extend(cell_param_shapes(self.kind, self.input_dim, self.hidden_dim, self.blocks, 0));
        v.push(("head.w".into(), vec![self.hidden_dim, self.output_dim]));
        v.push(("head.b".into(), vec![self.output_dim]));
        v
    }

    pub fn validate(&self) -> Result<()> {
        check_shapes(&self.params, &self.expected_shapes())
    }

    /// Number of hidden states a rollout produces for a sequence of `len` tokens.
    pub fn steps_for(&self, len: usize) -> usize {
        if self.kind.is_recurrent() {
            len
        } else {
            self.blocks
        }
    }

    pub fn build_rollout(&self, g: &mut Graph, prefix: &str, batch: &SeqBatch) -> RolloutNodes {
        build_rollout(g, self.kind, prefix, self.hidden_dim, self.blocks, None, "head", batch)
    }

    /// Valid-step counts for a batch under this model's notion of time.
    pub fn lengths(&self, batch: &SeqBatch) -> Vec<usize> {
        batch.lengths().into_iter().map(|l| self.steps_for(l)).collect()
    }

    pub fn rollout(&self, batch: &SeqBatch) -> Result<Trajectory> {
        batch.check_vocab(self.vocab_size)?;
        let mut g = Graph::new();
        let nodes = self.build_rollout(&mut g, "", batch);
        g.forward(nodes.logits, &self.params)?;
        Ok(Trajectory::from_graph(&g, &nodes, self.lengths(batch)))
    }

    pub fn rollout_sequence(&self, tokens: &[usize]) -> Result<Trajectory> {
        self.rollout(&SeqBatch::new(&[tokens])?)
    }

    /// One recurrent transition for a batch of input-embedding rows `xs`
    /// and states `hs`.
    pub fn step(&self, xs: &Tensor, hs: &Tensor) -> Result<Tensor> {
        if !self.kind.is_recurrent() {
            return Err(Error::Analysis("residual models have no recurrent step".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(xs.clone());
        let h = g.constant(hs.clone());
        let out = CellLeaves::new(&mut g, self.kind, "", 0, false).step(&mut g, x, h);
        g.forward(out, &self.params)
    }

    pub fn quantize_f32(&mut self) {
        self.params.values_mut().for_each(Tensor::quantize_f32);
    }
}

/// The theta-conditioned network with one readout head per task group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub kind: CellKind,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub theta_dim: usize,
    pub hidden_dim: usize,
    pub blocks: usize,
    /// Output width of each task group's head.
    pub heads: BTreeMap<usize, usize>,
    pub params: Bindings,
}

impl MetaModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: CellKind,
        vocab_size: usize,
        input_dim: usize,
        theta_dim: usize,
        hidden_dim: usize,
        blocks: usize,
        heads: BTreeMap<usize, usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if theta_dim == 0 || hidden_dim == 0 || input_dim == 0 || vocab_size == 0 {
            return Err(Error::Shape("meta-model dimensions must be positive".into()));
        }
        if heads.is_empty() {
            return Err(Error::Config("meta-model needs at least one readout head".into()));
        }
        if kind == CellKind::ResidualMlp && blocks == 0 {
            return Err(Error::Shape("residual models need at least one block".into()));
        }
        let blocks = if kind.is_recurrent() { 0 } else { blocks };
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut params = Bindings::new();
        params.insert("embed".into(), normal(rng, &[vocab_size, input_dim], 1.0));
        for (name, shape) in cell_param_shapes(kind, input_dim, hidden_dim, blocks, theta_dim) {
            params.insert(name, uniform(rng, &shape, bound));
        }
        for (&group, &out) in &heads {
            params.insert(format!("head{group}.w"), uniform(rng, &[hidden_dim, out], bound));
            params.insert(format!("head{group}.b"), uniform(rng, &[out], bound));
        }
        Ok(Self {
            kind,
            vocab_size,
            input_dim,
            theta_dim,
            hidden_dim,
            blocks,
            heads,
            params,
        })
    }

    /// Meta-model sized for a population: one head per task group and a
    /// hidden width of twice the largest base hidden width unless given.
    pub fn for_population(
        bases: &[BaseModel],
        input_dim: usize,
        theta_dim: usize,
        hidden_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| Error::Config("empty base population".into()))?;
        let mut heads = BTreeMap::new();
        for b in bases {
            if b.vocab_size != first.vocab_size {
                return Err(Error::Config(format!(
                    "input vocabularies differ: {} vs {}",
                    b.vocab_size, first.vocab_size
                )));
            }
            if b.kind.is_recurrent() != first.kind.is_recurrent() {
                return Err(Error::Config("mixed recurrent and residual populations".into()));
            }
            match heads.insert(b.task_group, b.output_dim) {
                Some(prev) if prev != b.output_dim => {
                    return Err(Error::Config(format!(
                        "task group {} has output widths {prev} and {}",
                        b.task_group, b.output_dim
                    )))
                }
                _ => {}
            }
        }
        let hidden = hidden_dim.unwrap_or_else(|| 2 * bases.iter().map(|b| b.hidden_dim).max().unwrap_or(1));
        let kind = if first.kind.is_recurrent() { CellKind::Gru } else { CellKind::ResidualMlp };
        let blocks = bases.iter().map(|b| b.blocks).max().unwrap_or(0);
        Self::new(kind, first.vocab_size, input_dim, theta_dim, hidden, blocks, heads, rng)
    }

    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![("embed".to_string(), vec![self.vocab_size, self.input_dim])];
        v.extend(cell_param_shapes(
            self.kind,
            self.input_dim,
            self.hidden_dim,
            self.blocks,
            self.theta_dim,
        ));
        for (&group, &out) in &self.heads {
            v.push((format!("head{group}.w"), vec![self.hidden_dim, out]));
            v.push((format!("head{group}.b"), vec![out]));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        check_shapes(&self.params, &self.expected_shapes())
    }

    pub fn head_name(group: usize) -> String {
        format!("head{group}")
    }

    pub fn check_head(&self, group: usize) -> Result<usize> {
        self.heads.get(&group).copied().ok_or(Error::MissingHead { group })
    }

    pub fn steps_for(&self, len: usize) -> usize {
        if self.kind.is_recurrent() {
            len
        } else {
            self.blocks
        }
    }

    pub fn lengths(&self, batch: &SeqBatch) -> Vec<usize> {
        batch.lengths().into_iter().map(|l| self.steps_for(l)).collect()
    }

    /// Rollout conditioned on the `[1, theta_dim]` node `theta`.
    pub fn build_rollout(
        &self,
        g: &mut Graph,
        prefix: &str,
        theta: NodeId,
        group: usize,
        batch: &SeqBatch,
    ) -> Result<RolloutNodes> {
        self.check_head(group)?;
        Ok(build_rollout(
            g,
            self.kind,
            prefix,
            self.hidden_dim,
            self.blocks,
            Some(theta),
            &Self::head_name(group),
            batch,
        ))
    }

    pub fn rollout(&self, theta: &[f64], group: usize, batch: &SeqBatch) -> Result<Trajectory> {
        self.check_theta(theta)?;
        batch.check_vocab(self.vocab_size)?;
        let mut g = Graph::new();
        let th = g.constant(Tensor::vector(theta.to_vec()));
        let nodes = self.build_rollout(&mut g, "", th, group, batch)?;
        g.forward(nodes.logits, &self.params)?;
        Ok(Trajectory::from_graph(&g, &nodes, self.lengths(batch)))
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta_dim {
            return Err(Error::Shape(format!(
                "theta has {} entries, meta-model expects {}",
                theta.len(),
                self.theta_dim
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite theta".into()));
        }
        Ok(())
    }

    /// One recurrent transition `F(theta, x, h)` for a batch of explicit
    /// input vectors `xs` (rows in token-embedding space) and states `hs`.
    pub fn step(&self, theta: &[f64], xs: &Tensor, hs: &Tensor) -> Result<Tensor> {
        self.check_theta(theta)?;
        if !self.kind.is_recurrent() {
            return Err(Error::Analysis("residual meta-models have no recurrent step".into()));
        }
        let mut g = Graph::new();
        let th = g.constant(Tensor::vector(theta.to_vec()));
        let x = g.constant(xs.clone());
        let h = g.constant(hs.clone());
        let out = self.build_step(&mut g, "", th, x, h, hs.rows());
        g.forward(out, &self.params)
    }

    /// Graph for one transition from states `h` (`[rows, hidden]`).
    pub(crate) fn build_step(
        &self,
        g: &mut Graph,
        prefix: &str,
        theta: NodeId,
        x: NodeId,
        h: NodeId,
        rows: usize,
    ) -> NodeId {
        let cell = CellLeaves::new(g, self.kind, prefix, self.blocks, true);
        let th = g.repeat_rows(theta, rows);
        let xin = g.concat(&[th, x], Axis::Cols);
        cell.step(g, xin, h)
    }

    /// Readout of explicit hidden states through the head of `group`.
    pub fn readout(&self, group: usize, hs: &Tensor) -> Result<Tensor> {
        self.check_head(group)?;
        let mut g = Graph::new();
        let h = g.constant(hs.clone());
        let name = Self::head_name(group);
        let w = g.leaf(format!("{name}.w"));
        let b = g.leaf(format!("{name}.b"));
        let l = g.matmul(h, w);
        let l = g.add(l, b);
        g.forward(l, &self.params)
    }

    /// Rows of the meta-model's own token-embedding table.
    pub fn token_embeddings(&self, tokens: &[usize]) -> Result<Tensor> {
        let table = &self.params["embed"];
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfRange { token, vocab: self.vocab_size });
        }
        Ok(Tensor::from_rows(
            &tokens.iter().map(|&t| table.row(t).to_vec()).collect::<Vec<_>>(),
        ))
    }

    pub fn quantize_f32(&mut self) {
        self.params.values_mut().for_each(Tensor::quantize_f32);
    }
}

/// Affine map from meta hidden space into one base model's hidden space:
/// `V(h) = h W + b` with `W` stored `[meta_hidden, base_hidden]`. Residual
/// populations carry one map per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMap {
    pub params: Bindings,
}

impl StateMap {
    pub fn weight_name(t: usize) -> String {
        format!("w{t}")
    }

    pub fn bias_name(t: usize) -> String {
        format!("b{t}")
    }

    pub fn new(meta_dim: usize, base_dim: usize, count: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (meta_dim as f64).sqrt();
        let mut params = Bindings::new();
        for t in 0..count.max(1) {
            params.insert(Self::weight_name(t), uniform(rng, &[meta_dim, base_dim], bound));
            params.insert(Self::bias_name(t), Tensor::zeros(&[base_dim]));
        }
        Self { params }
    }

    pub fn from_parts(parts: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let mut params = Bindings::new();
        for (t, (w, b)) in parts.into_iter().enumerate() {
            if w.cols() != b.len() || b.rows() != 1 {
                return Err(Error::Shape(format!(
                    "state map weight {:?} incompatible with bias {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
            params.insert(Self::weight_name(t), w);
            params.insert(Self::bias_name(t), b);
        }
        Ok(Self { params })
    }

    pub fn count(&self) -> usize {
        self.params.len() / 2
    }

    pub fn weight(&self, t: usize) -> &Tensor {
        &self.params[&Self::weight_name(t)]
    }

    pub fn bias(&self, t: usize) -> &Tensor {
        &self.params[&Self::bias_name(t)]
    }

    pub fn base_dim(&self) -> usize {
        self.weight(0).cols()
    }

    pub fn meta_dim(&self) -> usize {
        self.weight(0).rows()
    }

    /// Map `t` applied to a batch of meta states.
    pub fn apply_rows(&self, t: usize, hs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = g.constant(hs.clone());
        let out = self.build_apply(&mut g, "", t, h);
        g.forward(out, &self.params)
    }

    pub(crate) fn build_apply(&self, g: &mut Graph, prefix: &str, t: usize, h: NodeId) -> NodeId {
        let w = g.leaf(format!("{prefix}{}", Self::weight_name(t)));
        let b = g.leaf(format!("{prefix}{}", Self::bias_name(t)));
        let m = g.matmul(h, w);
        g.add(m, b)
    }

    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with('w'))
            .map(|(_, t)| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn quantize_f32(&mut self) {
        self.params.values_mut().for_each(Tensor::quantize_f32);
    }
}

/// `V(h) = h W + b` for a single meta state (first map of the family).
pub fn apply_state_map(v: &StateMap, h_meta: &[f64]) -> Result<Vec<f64>> {
    Ok(v.apply_rows(0, &Tensor::vector(h_meta.to_vec()))?.into_data())
}

/// A point in model embedding space, optionally tied to a base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEmbedding {
    pub theta: Vec<f64>,
    pub model_id: Option<usize>,
}

impl ModelEmbedding {
    pub fn new(theta: Vec<f64>, model_id: Option<usize>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        Ok(Self { theta, model_id })
    }
}

fn step_with(build: impl FnOnce(&mut Graph, NodeId, NodeId) -> NodeId, params: &dyn Bind, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xn = g.constant(Tensor::vector(x.to_vec()));
    let hn = g.constant(Tensor::vector(h.to_vec()));
    let out = build(&mut g, xn, hn);
    Ok(g.forward(out, params)?.into_data())
}

/// One GRU transition with parameters named `cell.w_z`, `cell.b_z`, ...
pub fn gru_step(params: &Bindings, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    step_with(
        |g, x, h| CellLeaves::new(g, CellKind::Gru, "", 0, false).step(g, x, h),
        params,
        x,
        h,
    )
}

/// `tanh(x W_x + h W_h + b)` with parameters `cell.w_x`, `cell.w_h`, `cell.b`.
pub fn vanilla_rnn_step(params: &Bindings, x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    step_with(
        |g, x, h| CellLeaves::new(g, CellKind::VanillaRnn, "", 0, false).step(g, x, h),
        params,
        x,
        h,
    )
}

/// One residual block with parameters `a1`, `b1`, `a2`, `b2` and, when
/// `theta` is given, the shared conditioning matrix `w_theta`.
pub fn residual_block_step(params_t: &Bindings, theta: Option<&[f64]>, features: &[f64]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let leaves = BlockLeaves {
        a1: g.leaf("a1"),
        b1: g.leaf("b1"),
        a2: g.leaf("a2"),
        b2: g.leaf("b2"),
    };
    let theta_bias = theta.map(|th| {
        let t = g.constant(Tensor::vector(th.to_vec()));
        let w = g.leaf("w_theta");
        g.matmul(t, w)
    });
    let f = g.constant(Tensor::vector(features.to_vec()));
    let out = residual_block_graph(&mut g, &leaves, theta_bias, f);
    Ok(g.forward(out, &Layers(vec![params_t]))?.into_data())
}
