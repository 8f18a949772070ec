//! Base-model training and joint meta-model training.
//!
//! Meta-training follows the usual emulation loop: sample a base model
//! uniformly, sample a minibatch from its unlabeled data, roll out the base
//! model without gradients, roll out the meta-model at that model's
//! embedding, and take one optimizer step on the meta parameters, the
//! model's state map and its embedding together.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BaseModel, MetaModel, SeqBatch, StateMap, Trajectory};
use crate::numgrad::{kl_row, Axis, Bind, Bindings, Graph, NodeId, Tensor};
use crate::tasks::{SequenceDataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamDecoupledWd,
    SgdNesterov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenMetric {
    L2Squared,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputDivergence {
    SquaredL2OnLogits,
    KlOnSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Separate embedding learning rate; the shared rate when absent.
    pub theta_lr: Option<f64>,
    pub cosine: bool,
    pub cosine_freq: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub hidden_metric: HiddenMetric,
    pub output_divergence: OutputDivergence,
    /// Divide the hidden loss by the base hidden width.
    pub normalize_hidden: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamDecoupledWd,
            lr: 1e-3,
            theta_lr: None,
            cosine: true,
            cosine_freq: 7.0 / 32.0,
            beta1: 0.9,
            beta2: 0.999,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 20,
            max_steps: 10_000,
            batch_size: 32,
            lambda: 1.0,
            hidden_metric: HiddenMetric::L2Squared,
            output_divergence: OutputDivergence::KlOnSoftmax,
            normalize_hidden: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.theta_lr.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning-rate multiplier at step `t` of `total`.
    pub fn schedule(&self, t: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return 1.0;
        }
        (2.0 * std::f64::consts::PI * self.cosine_freq * t as f64 / total as f64).cos()
    }

    fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            metric: self.hidden_metric,
            divergence: self.output_divergence,
            normalize_hidden: self.normalize_hidden,
        }
    }
}

/// AdamW or Nesterov SGD with per-parameter state keyed by name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    momentum: f64,
    eps: f64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>, u64)>,
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            momentum: cfg.momentum,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update to `param`. Weight decay is decoupled from the
    /// gradient for both optimizers.
    pub fn update(&mut self, key: &str, param: &mut Tensor, grad: &Tensor, lr: f64, wd: f64) {
        let n = param.len();
        let (m, v, step) = self
            .state
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
        *step += 1;
        let p = param.data_mut();
        let g = grad.data();
        match self.kind {
            OptimizerKind::AdamDecoupledWd => {
                let bc1 = 1.0 - self.beta1.powi(*step as i32);
                let bc2 = 1.0 - self.beta2.powi(*step as i32);
                for i in 0..n {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    p[i] -= lr * (mh / (vh.sqrt() + self.eps) + wd * p[i]);
                }
            }
            OptimizerKind::SgdNesterov => {
                for i in 0..n {
                    m[i] = self.momentum * m[i] + g[i];
                    p[i] -= lr * (g[i] + self.momentum * m[i] + wd * p[i]);
                }
            }
        }
    }
}

/// Loss options shared by the value-level and graph-level losses.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub lambda: f64,
    pub metric: HiddenMetric,
    pub divergence: OutputDivergence,
    pub normalize_hidden: bool,
}

fn metric(a: &[f64], b: &[f64], m: HiddenMetric) -> f64 {
    let it = a.iter().zip(b).map(|(x, y)| x - y);
    match m {
        HiddenMetric::L2Squared => it.map(|d| d * d).sum(),
        HiddenMetric::L1 => it.map(f64::abs).sum(),
    }
}

fn check_lengths(meta: &Trajectory, base: &Trajectory) -> Result<()> {
    if meta.batch != base.batch {
        return Err(Error::LengthMismatch(meta.batch, base.batch));
    }
    for (&a, &b) in meta.lengths.iter().zip(&base.lengths) {
        if a != b {
            return Err(Error::LengthMismatch(a, b));
        }
    }
    Ok(())
}

/// Time-mean of `metric(V(h_meta_t), h_base_t)`, averaged over the batch.
/// Residual trajectories (one map per block) are also averaged over
/// feature coordinates.
pub fn hidden_loss(meta: &Trajectory, base: &Trajectory, v: &StateMap, m: HiddenMetric) -> Result<f64> {
    check_lengths(meta, base)?;
    let per_block = v.count() > 1;
    let dim = base.hidden.cols();
    let mut total = 0.0;
    for b in 0..meta.batch {
        let len = meta.lengths[b];
        let mut acc = 0.0;
        for t in 0..len {
            let mapped = v.apply_rows(if per_block { t } else { 0 }, &Tensor::vector(meta.hidden_at(t, b).to_vec()))?;
            let mut d = metric(mapped.data(), base.hidden_at(t, b), m);
            if per_block {
                d /= dim as f64;
            }
            acc += d;
        }
        total += acc / len as f64;
    }
    Ok(total / meta.batch as f64)
}

/// Time-mean divergence between per-step meta and base outputs. The KL
/// option compares `softmax(base)` against `softmax(meta)`.
pub fn output_loss(meta: &Trajectory, base: &Trajectory, d: OutputDivergence) -> Result<f64> {
    check_lengths(meta, base)?;
    if meta.logits.cols() != base.logits.cols() {
        return Err(Error::Shape(format!(
            "meta head emits {} outputs but the base model emits {}; wrong task-group head",
            meta.logits.cols(),
            base.logits.cols()
        )));
    }
    let mut total = 0.0;
    for b in 0..meta.batch {
        let len = meta.lengths[b];
        let mut acc = 0.0;
        for t in 0..len {
            let (lm, lb) = (meta.logits_at(t, b), base.logits_at(t, b));
            acc += match d {
                OutputDivergence::SquaredL2OnLogits => metric(lm, lb, HiddenMetric::L2Squared),
                OutputDivergence::KlOnSoftmax => kl_row(lb, lm),
            };
        }
        total += acc / len as f64;
    }
    Ok(total / meta.batch as f64)
}

/// Hidden, output and combined loss of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub hidden: f64,
    pub output: f64,
    pub total: f64,
}

pub struct LossNodes {
    pub hidden: NodeId,
    pub output: NodeId,
    pub total: NodeId,
}

/// Builds the emulation loss of one batch. Leaves: `meta.*` for the
/// meta-model, `v.w{t}`/`v.b{t}` for the state map and `theta`.
pub fn build_meta_loss(
    g: &mut Graph,
    meta: &MetaModel,
    base: &BaseModel,
    base_traj: &Trajectory,
    batch: &SeqBatch,
    maps: usize,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let meta_lengths = meta.lengths(batch);
    for (&a, &b) in meta_lengths.iter().zip(&base_traj.lengths) {
        if a != b {
            return Err(Error::LengthMismatch(a, b));
        }
    }
    let out_dim = meta.check_head(base.task_group)?;
    if out_dim != base.output_dim {
        return Err(Error::Shape(format!(
            "head {} emits {out_dim} outputs, base model emits {}",
            base.task_group, base.output_dim
        )));
    }
    let theta = g.leaf("theta");
    let nodes = meta.build_rollout(g, "meta.", theta, base.task_group, batch)?;
    let steps = nodes.hidden.len();
    let n = batch.len();
    let mapped = if maps > 1 {
        let parts: Vec<NodeId> = nodes
            .hidden
            .iter()
            .enumerate()
            .map(|(t, &h)| apply_map_node(g, t, h))
            .collect();
        g.concat(&parts, Axis::Rows)
    } else {
        apply_map_node(g, 0, nodes.stacked)
    };
    let target_h = g.constant(base_traj.hidden.clone());
    let target_y = g.constant(base_traj.logits.clone());
    let recurrent = meta.kind.is_recurrent();
    let hdim = if cfg.normalize_hidden { base.hidden_dim as f64 } else { 1.0 };
    let mut wh = vec![0.0; steps * n];
    let mut wy = vec![0.0; steps * n];
    for (b, &len) in base_traj.lengths.iter().enumerate() {
        for t in 0..len {
            wh[t * n + b] = 1.0 / (n as f64 * len as f64 * hdim);
            if recurrent {
                wy[t * n + b] = 1.0 / (n as f64 * len as f64);
            }
        }
        if !recurrent {
            wy[(steps - 1) * n + b] = 1.0 / n as f64;
        }
    }
    let hidden = match cfg.metric {
        HiddenMetric::L2Squared => g.squared_l2(mapped, target_h, Some(wh)),
        HiddenMetric::L1 => g.l1(mapped, target_h, Some(wh)),
    };
    let output = match cfg.divergence {
        OutputDivergence::SquaredL2OnLogits => g.squared_l2(nodes.logits, target_y, Some(wy)),
        OutputDivergence::KlOnSoftmax => g.kl_softmax(target_y, nodes.logits, Some(wy)),
    };
    let weighted = g.scale(output, cfg.lambda);
    let total = g.sum(&[hidden, weighted]);
    Ok(LossNodes { hidden, output, total })
}

fn apply_map_node(g: &mut Graph, t: usize, h: NodeId) -> NodeId {
    let w = g.leaf(format!("v.{}", StateMap::weight_name(t)));
    let b = g.leaf(format!("v.{}", StateMap::bias_name(t)));
    let m = g.matmul(h, w);
    g.add(m, b)
}

/// One record of the meta-training loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub model_id: usize,
    pub hidden_loss: f64,
    pub output_loss: f64,
    pub total_loss: f64,
}

/// Meta-model, per-model state maps and embeddings plus training progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainState {
    pub meta: MetaModel,
    pub state_maps: Vec<StateMap>,
    pub embeddings: Vec<Vec<f64>>,
    pub step: usize,
    pub history: Vec<LossRecord>,
}

impl MetaTrainState {
    /// Fresh state: embeddings at zero and one randomly initialized map per
    /// base model (one per block for residual populations).
    pub fn init(
        bases: &[BaseModel],
        input_dim: usize,
        theta_dim: usize,
        hidden_dim: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = MetaModel::for_population(bases, input_dim, theta_dim, hidden_dim, &mut rng)?;
        let state_maps = bases
            .iter()
            .map(|b| StateMap::new(meta.hidden_dim, b.hidden_dim, b.blocks.max(1), &mut rng))
            .collect();
        Ok(Self {
            meta,
            state_maps,
            embeddings: vec![vec![0.0; theta_dim]; bases.len()],
            step: 0,
            history: Vec::new(),
        })
    }

    fn bindings_for<'a>(&'a self, n: usize, theta: &'a Bindings) -> MetaBind<'a> {
        MetaBind { meta: &self.meta.params, v: &self.state_maps[n].params, theta }
    }

    pub fn quantize_f32(&mut self) {
        self.meta.quantize_f32();
        self.state_maps.iter_mut().for_each(StateMap::quantize_f32);
        for th in &mut self.embeddings {
            th.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Leaf source for the emulation loss of one base model.
pub(crate) struct MetaBind<'a> {
    pub meta: &'a Bindings,
    pub v: &'a Bindings,
    pub theta: &'a Bindings,
}

impl Bind for MetaBind<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        if let Some(k) = name.strip_prefix("meta.") {
            self.meta.get(k)
        } else if let Some(k) = name.strip_prefix("v.") {
            self.v.get(k)
        } else {
            self.theta.get(name)
        }
    }
}

fn theta_binding(theta: &[f64]) -> Bindings {
    let mut b = Bindings::new();
    b.insert("theta".into(), Tensor::vector(theta.to_vec()));
    b
}

/// Emulation loss of base model `n` on `batch`.
pub fn total_loss(
    state: &MetaTrainState,
    base: &BaseModel,
    n: usize,
    batch: &SeqBatch,
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let base_traj = base.rollout(batch)?;
    let mut g = Graph::new();
    let nodes = build_meta_loss(
        &mut g,
        &state.meta,
        base,
        &base_traj,
        batch,
        state.state_maps[n].count(),
        &cfg.loss_config(),
    )?;
    let th = theta_binding(&state.embeddings[n]);
    let total = g.forward(nodes.total, &state.bindings_for(n, &th))?.item();
    Ok(LossParts {
        hidden: g.value(nodes.hidden).expect("forwarded").item(),
        output: g.value(nodes.output).expect("forwarded").item(),
        total,
    })
}

/// Gradients of the emulation loss, keyed `meta.*`, `v.*` and `theta`.
pub fn meta_gradients(
    state: &MetaTrainState,
    base: &BaseModel,
    n: usize,
    batch: &SeqBatch,
    cfg: &TrainConfig,
) -> Result<(LossParts, Bindings)> {
    let base_traj = base.rollout(batch)?;
    let mut g = Graph::new();
    let nodes = build_meta_loss(
        &mut g,
        &state.meta,
        base,
        &base_traj,
        batch,
        state.state_maps[n].count(),
        &cfg.loss_config(),
    )?;
    let th = theta_binding(&state.embeddings[n]);
    let total = g.forward(nodes.total, &state.bindings_for(n, &th))?.item();
    let parts = LossParts {
        hidden: g.value(nodes.hidden).expect("forwarded").item(),
        output: g.value(nodes.output).expect("forwarded").item(),
        total,
    };
    if !total.is_finite() {
        return Err(Error::Numeric(format!("non-finite emulation loss for model {n}")));
    }
    Ok((parts, g.backward(1.0)?))
}

fn apply_meta_update(
    state: &mut MetaTrainState,
    opt: &mut Optimizer,
    n: usize,
    grads: &Bindings,
    lr: f64,
    theta_lr: f64,
    wd: f64,
) {
    for (name, grad) in grads {
        if let Some(k) = name.strip_prefix("meta.") {
            let p = state.meta.params.get_mut(k).expect("meta parameter");
            opt.update(name, p, grad, lr, wd);
        } else if let Some(k) = name.strip_prefix("v.") {
            let p = state.state_maps[n].params.get_mut(k).expect("state map parameter");
            opt.update(&format!("v{n}.{k}"), p, grad, lr, wd);
        } else if name == "theta" {
            let mut t = Tensor::vector(state.embeddings[n].clone());
            opt.update(&format!("theta{n}"), &mut t, grad, theta_lr, 0.0);
            state.embeddings[n] = t.into_data();
        }
    }
}

/// Runs `cfg.max_steps` emulation steps. `datasets[n]` supplies the
/// meta-training sequences of base model `n`.
pub fn train_meta(
    mut state: MetaTrainState,
    bases: &[BaseModel],
    datasets: &[&SequenceDataset],
    cfg: &TrainConfig,
) -> Result<MetaTrainState> {
    cfg.validate()?;
    if bases.len() != datasets.len() || bases.len() != state.embeddings.len() {
        return Err(Error::Config(format!(
            "{} base models, {} datasets, {} embeddings",
            bases.len(),
            datasets.len(),
            state.embeddings.len()
        )));
    }
    for b in bases {
        if b.vocab_size != state.meta.vocab_size {
            return Err(Error::Config(format!(
                "base vocabulary {} differs from meta vocabulary {}",
                b.vocab_size, state.meta.vocab_size
            )));
        }
    }
    let pools = datasets
        .iter()
        .map(|d| d.require(Split::MetaUnlabeled))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg);
    let theta_lr = cfg.theta_lr.unwrap_or(cfg.lr);
    for step in 0..cfg.max_steps {
        let i = rng.random_range(0..bases.len());
        let seqs: Vec<&[usize]> = (0..cfg.batch_size)
            .map(|_| datasets[i].sequences[pools[i][rng.random_range(0..pools[i].len())]].as_slice())
            .collect();
        let batch = SeqBatch::new(&seqs)?;
        let (parts, grads) = meta_gradients(&state, &bases[i], i, &batch, cfg)?;
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite meta loss at step {step} (model {i})")));
        }
        let s = cfg.schedule(step, cfg.max_steps);
        apply_meta_update(&mut state, &mut opt, i, &grads, cfg.lr * s, theta_lr * s, cfg.weight_decay);
        state.step += 1;
        state.history.push(LossRecord {
            step: state.step,
            model_id: i,
            hidden_loss: parts.hidden,
            output_loss: parts.output,
            total_loss: parts.total,
        });
        if step % 500 == 0 {
            log::debug!("meta step {step}: model {i} loss {:.5}", parts.total);
        }
    }
    Ok(state)
}

/// Loss history as CSV (`step,model_id,hidden_loss,output_loss,total_loss`).
pub fn loss_history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,model_id,hidden_loss,output_loss,total_loss\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step, r.model_id, r.hidden_loss, r.output_loss, r.total_loss
        );
    }
    s
}

/// Fraction of examples `idx` whose final-step prediction matches the label.
pub fn base_accuracy(model: &BaseModel, ds: &SequenceDataset, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&i| ds.sequences[i].as_slice()).collect();
        let preds = model.rollout(&SeqBatch::new(&seqs)?)?.predictions();
        correct += preds.iter().zip(chunk).filter(|(p, &i)| **p == ds.labels[i]).count();
    }
    Ok(correct as f64 / idx.len() as f64)
}

/// Outcome of supervised base-model training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseReport {
    /// Test accuracy after each epoch.
    pub accuracy_curve: Vec<f64>,
    pub loss_curve: Vec<f64>,
    pub test_accuracy: f64,
}

/// Builds the mean final-step cross-entropy of a batch under prefix "".
pub(crate) fn build_task_loss(g: &mut Graph, model: &BaseModel, batch: &SeqBatch, labels: &[usize]) -> NodeId {
    let nodes = model.build_rollout(g, "", batch);
    task_loss_node(g, nodes.logits, &model.lengths(batch), labels)
}

/// Cross-entropy over the rows of step-major logits that hold each
/// sequence's final step.
pub(crate) fn task_loss_node(g: &mut Graph, logits: NodeId, lengths: &[usize], labels: &[usize]) -> NodeId {
    let n = lengths.len();
    let steps = lengths.iter().copied().max().unwrap_or(1);
    let mut w = vec![0.0; steps * n];
    let mut lab = vec![0; steps * n];
    for (b, &len) in lengths.iter().enumerate() {
        w[(len - 1) * n + b] = 1.0 / n as f64;
        lab[(len - 1) * n + b] = labels[b];
    }
    g.softmax_xent(logits, lab, Some(w))
}

/// Minibatch training on the `base_train` split, evaluated on `test`.
pub fn train_base(model: &mut BaseModel, ds: &SequenceDataset, cfg: &TrainConfig) -> Result<BaseReport> {
    cfg.validate()?;
    if ds.num_classes != model.output_dim {
        return Err(Error::Config(format!(
            "dataset has {} classes, model emits {}",
            ds.num_classes, model.output_dim
        )));
    }
    let train = ds.require(Split::BaseTrain)?;
    let test = ds.require(Split::Test)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg);
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut order = train.clone();
    let mut report = BaseReport { accuracy_curve: Vec::new(), loss_curve: Vec::new(), test_accuracy: 0.0 };
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|&i| ds.sequences[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let batch = SeqBatch::new(&seqs)?;
            let mut g = Graph::new();
            let loss = build_task_loss(&mut g, model, &batch, &labels);
            let value = g.forward(loss, &model.params)?.item();
            if !value.is_finite() {
                return Err(Error::Numeric("non-finite task loss".into()));
            }
            epoch_loss += value * chunk.len() as f64;
            let grads = g.backward(1.0)?;
            let lr = cfg.lr * cfg.schedule(step, total);
            for (name, grad) in &grads {
                let p = model.params.get_mut(name).expect("model parameter");
                opt.update(name, p, grad, lr, cfg.weight_decay);
            }
            step += 1;
        }
        report.loss_curve.push(epoch_loss / train.len() as f64);
        report.accuracy_curve.push(base_accuracy(model, ds, &test)?);
    }
    report.test_accuracy = match report.accuracy_curve.last() {
        Some(&a) => a,
        None => base_accuracy(model, ds, &test)?,
    };
    Ok(report)
}

/// Distribution of the one-step conjugacy defect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyStats {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

/// `|| V(F~(theta, x_t, h_t)) - F(x_t, V(h_t)) ||` over the meta states
/// `h_t` visited by the meta rollout (starting from zero) on `batch`.
pub fn conjugacy_residual(
    state: &MetaTrainState,
    base: &BaseModel,
    n: usize,
    batch: &SeqBatch,
) -> Result<ConjugacyStats> {
    if !base.kind.is_recurrent() || !state.meta.kind.is_recurrent() {
        return Err(Error::Analysis("conjugacy residual needs recurrent models".into()));
    }
    let theta = &state.embeddings[n];
    let v = &state.state_maps[n];
    let traj = state.meta.rollout(theta, base.task_group, batch)?;
    let (mut prev, mut tokens) = (Vec::new(), Vec::new());
    for (b, s) in batch.sequences().iter().enumerate() {
        for (t, &tok) in s.iter().enumerate() {
            prev.push(if t == 0 {
                vec![0.0; state.meta.hidden_dim]
            } else {
                traj.hidden_at(t - 1, b).to_vec()
            });
            tokens.push(tok);
        }
    }
    let h = Tensor::from_rows(&prev);
    let next = state.meta.step(theta, &state.meta.token_embeddings(&tokens)?, &h)?;
    let lhs = v.apply_rows(0, &next)?;
    let base_x = Tensor::from_rows(
        &tokens.iter().map(|&t| base.params["embed"].row(t).to_vec()).collect::<Vec<_>>(),
    );
    let rhs = base.step(&base_x, &v.apply_rows(0, &h)?)?;
    let mut stats = ConjugacyStats { mean: 0.0, max: 0.0, count: tokens.len() };
    for r in 0..tokens.len() {
        let d = metric(lhs.row(r), rhs.row(r), HiddenMetric::L2Squared).sqrt();
        stats.mean += d;
        stats.max = stats.max.max(d);
    }
    stats.mean /= tokens.len() as f64;
    Ok(stats)
}
