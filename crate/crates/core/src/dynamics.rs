//! Fixed points of the embedding-conditioned recurrent map.
//!
//! Approximate fixed points of `h -> F(theta, x*, h)` are found by gradient
//! descent on `q(h) = ||F(theta, x*, h) - h||^2` from states visited by real
//! rollouts, then summarized as a (possibly line-shaped) attractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::{fit_pca, GridSpec, Plane};
use crate::error::{Error, Result};
use crate::models::{MetaModel, SeqBatch};
use crate::numgrad::{Bindings, Graph, Layers, NodeId, Prefixed, Tensor};
use crate::tasks::{SequenceDataset, Valence};

/// Hidden states sampled uniformly (with replacement) from the meta
/// rollout of every sequence in `batch`, `samples_per_seq` per sequence.
pub fn collect_candidates(
    meta: &MetaModel,
    theta: &[f64],
    group: usize,
    batch: &SeqBatch,
    samples_per_seq: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let traj = meta.rollout(theta, group, batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch.len() * samples_per_seq);
    for b in 0..traj.batch {
        for _ in 0..samples_per_seq {
            let t = rng.random_range(0..traj.lengths[b]);
            out.push(traj.hidden_at(t, b).to_vec());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointOptions {
    /// Residual `||F(h) - h||` a retained point must reach.
    pub tol: f64,
    /// Dedup radius in hidden space.
    pub radius: f64,
    pub max_steps: usize,
    /// Initial per-candidate step size.
    pub step_size: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self { tol: 1e-4, radius: 1e-2, max_steps: 5000, step_size: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSet {
    pub points: Vec<Vec<f64>>,
    /// `||F(theta, x*, h) - h||` re-evaluated at each retained point.
    pub residuals: Vec<f64>,
    pub theta: Vec<f64>,
    pub x_star: Vec<f64>,
    /// Source candidate index of each point.
    pub candidate: Vec<usize>,
    /// Descent steps taken by each point's candidate.
    pub steps: Vec<usize>,
}

impl FixedPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn x_rows(x_star: &[f64], rows: usize) -> Tensor {
    Tensor::matrix(rows, x_star.len(), x_star.iter().copied().cycle().take(rows * x_star.len()).collect())
}

fn fixed_point_nodes(g: &mut Graph, meta: &MetaModel, theta: &[f64], x_star: &[f64], rows: usize) -> (NodeId, NodeId) {
    let h = g.leaf("h");
    let th = g.constant(Tensor::vector(theta.to_vec()));
    let x = g.constant(x_rows(x_star, rows));
    let next = meta.build_step(g, "meta.", th, x, h, rows);
    (next, g.squared_l2(next, h, None))
}

/// Graph of `sum_r ||F(theta, x*, h_r) - h_r||^2` over the rows of the leaf
/// `h`. Meta-model parameters are leaves under `meta.`.
pub fn build_fixed_point_loss(g: &mut Graph, meta: &MetaModel, theta: &[f64], x_star: &[f64], rows: usize) -> NodeId {
    fixed_point_nodes(g, meta, theta, x_star, rows).1
}

/// Per-row `q(h)` and its gradient for a stack of states.
fn q_and_grad(meta: &MetaModel, theta: &[f64], x_star: &[f64], hs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let rows = hs.len();
    let mut g = Graph::new();
    let (next, loss) = fixed_point_nodes(&mut g, meta, theta, x_star, rows);
    let mut hb = Bindings::new();
    hb.insert("h".into(), Tensor::from_rows(hs));
    let mb = Prefixed { prefix: "meta.", inner: &meta.params };
    g.forward(loss, &Layers(vec![&hb, &mb]))?;
    let nv = g.value(next).expect("forwarded");
    let q = (0..rows)
        .map(|r| nv.row(r).iter().zip(&hs[r]).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let grads = g.backward(1.0)?;
    let gh = &grads["h"];
    Ok((q, (0..rows).map(|r| gh.row(r).to_vec()).collect()))
}

/// `||F(theta, x*, h) - h||` for each state, evaluated from scratch.
pub fn residuals(meta: &MetaModel, theta: &[f64], x_star: &[f64], hs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if hs.is_empty() {
        return Ok(Vec::new());
    }
    let rows = hs.len();
    let next = meta.step(theta, &x_rows(x_star, rows), &Tensor::from_rows(hs))?;
    Ok((0..rows)
        .map(|r| next.row(r).iter().zip(&hs[r]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect())
}

/// Gradient descent on `q` from every candidate with per-candidate step
/// halving on failure and growth on success. Candidates stop once
/// `q <= tol^2 / 4`; those ending with `q <= tol^2` are kept and then
/// deduplicated greedily in order of increasing residual.
pub fn find_fixed_points(
    meta: &MetaModel,
    theta: &[f64],
    x_star: &[f64],
    candidates: &[Vec<f64>],
    opts: &FixedPointOptions,
) -> Result<FixedPointSet> {
    if !(opts.tol > 0.0) {
        return Err(Error::Config("fixed-point tolerance must be positive".into()));
    }
    meta.check_theta(theta)?;
    if x_star.len() != meta.input_dim {
        return Err(Error::Shape(format!(
            "x* has {} entries, the meta-model reads {}",
            x_star.len(),
            meta.input_dim
        )));
    }
    let n = candidates.len();
    let mut h: Vec<Vec<f64>> = candidates.to_vec();
    let mut steps = vec![0usize; n];
    let mut lr = vec![opts.step_size; n];
    let target = opts.tol * opts.tol / 4.0;
    let (mut q, mut grad) = if n == 0 {
        (Vec::new(), Vec::new())
    } else {
        q_and_grad(meta, theta, x_star, &h)?
    };
    let mut active: Vec<usize> = (0..n).filter(|&i| q[i] > target).collect();
    for _ in 0..opts.max_steps {
        if active.is_empty() {
            break;
        }
        let proposals: Vec<Vec<f64>> = active
            .iter()
            .map(|&i| h[i].iter().zip(&grad[i]).map(|(a, g)| a - lr[i] * g).collect())
            .collect();
        let (pq, pg) = q_and_grad(meta, theta, x_star, &proposals)?;
        for (k, &i) in active.iter().enumerate() {
            steps[i] += 1;
            if pq[k] < q[i] {
                h[i] = proposals[k].clone();
                q[i] = pq[k];
                grad[i] = pg[k].clone();
                lr[i] *= 1.2;
            } else {
                lr[i] /= 2.0;
            }
        }
        active.retain(|&i| q[i] > target && lr[i] > 1e-14);
    }
    let kept: Vec<usize> = (0..n).filter(|&i| q[i] <= opts.tol * opts.tol).collect();
    let kept_h: Vec<Vec<f64>> = kept.iter().map(|&i| h[i].clone()).collect();
    let res = residuals(meta, theta, x_star, &kept_h)?;
    let mut order: Vec<usize> = (0..kept.len()).collect();
    order.sort_by(|&a, &b| res[a].total_cmp(&res[b]).then(kept[a].cmp(&kept[b])));
    let mut set = FixedPointSet {
        points: Vec::new(),
        residuals: Vec::new(),
        theta: theta.to_vec(),
        x_star: x_star.to_vec(),
        candidate: Vec::new(),
        steps: Vec::new(),
    };
    for k in order {
        if res[k] > opts.tol {
            continue;
        }
        let p = &kept_h[k];
        if set.points.iter().all(|s| dist(s, p) > opts.radius) {
            set.points.push(p.clone());
            set.residuals.push(res[k]);
            set.candidate.push(kept[k]);
            set.steps.push(steps[kept[k]]);
        }
    }
    Ok(set)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Scalar sentiment readout: logit of class 1 minus logit of class 0.
pub fn readout_margin(meta: &MetaModel, group: usize, hs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if meta.check_head(group)? < 2 {
        return Err(Error::Analysis("margin needs at least two classes".into()));
    }
    let logits = meta.readout(group, &Tensor::from_rows(hs))?;
    Ok((0..hs.len()).map(|r| logits.row(r)[1] - logits.row(r)[0]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttractorSummary {
    /// Unit first principal direction of the point cloud, oriented so the
    /// readout margin increases along it.
    pub axis: Vec<f64>,
    pub extent: f64,
    pub thickness: f64,
    /// Projections onto `axis`, ascending.
    pub positions: Vec<f64>,
    /// Readout margins at the points, in the order of `positions`.
    pub readout: Vec<f64>,
    /// Rank correlation between position and readout.
    pub spearman: f64,
}

impl AttractorSummary {
    /// Extent over thickness; infinite for an exact segment.
    pub fn aspect_ratio(&self) -> f64 {
        if self.thickness == 0.0 {
            f64::INFINITY
        } else {
            self.extent / self.thickness
        }
    }
}

/// PCA summary of a point cloud with a readout value per point.
pub fn summarize_points(points: &[Vec<f64>], readout: &[f64]) -> Result<AttractorSummary> {
    if points.len() < 2 {
        return Err(Error::Analysis("an attractor summary needs at least two points".into()));
    }
    let atlas = fit_pca(points)?;
    let mut axis = atlas.axes[0].clone();
    let mut proj: Vec<f64> = points.iter().map(|p| atlas.project(p)[0]).collect();
    let rest = &atlas.spectrum[1..];
    let thickness = if rest.is_empty() {
        0.0
    } else {
        (rest.iter().sum::<f64>() / rest.len() as f64).max(0.0).sqrt()
    };
    let mut rho = spearman(&proj, readout);
    if rho < 0.0 {
        axis.iter_mut().for_each(|v| *v = -*v);
        proj.iter_mut().for_each(|v| *v = -*v);
        rho = -rho;
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(readout[a].total_cmp(&readout[b])));
    let positions: Vec<f64> = order.iter().map(|&i| proj[i]).collect();
    Ok(AttractorSummary {
        axis,
        extent: positions[positions.len() - 1] - positions[0],
        thickness,
        readout: order.iter().map(|&i| readout[i]).collect(),
        positions,
        spearman: rho,
    })
}

pub fn summarize_attractor(fps: &FixedPointSet, meta: &MetaModel, group: usize) -> Result<AttractorSummary> {
    if fps.len() < 2 {
        return Err(Error::Analysis("an attractor summary needs at least two points".into()));
    }
    let margins = readout_margin(meta, group, &fps.points)?;
    summarize_points(&fps.points, &margins)
}

/// Index minimizing `|margin|`, ties broken by the lower residual.
pub fn neutral_index(margins: &[f64], residuals: &[f64]) -> Result<usize> {
    if margins.is_empty() {
        return Err(Error::Analysis("no fixed points".into()));
    }
    let mut best = 0;
    for i in 1..margins.len() {
        let (a, b) = (margins[i].abs(), margins[best].abs());
        if a < b || (a == b && residuals[i] < residuals[best]) {
            best = i;
        }
    }
    Ok(best)
}

/// The fixed point whose readout is closest to decision-neutral.
pub fn neutral_fixed_point(fps: &FixedPointSet, meta: &MetaModel, group: usize) -> Result<Vec<f64>> {
    let margins = readout_margin(meta, group, &fps.points)?;
    Ok(fps.points[neutral_index(&margins, &fps.residuals)?].clone())
}

/// Token sets used for word scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSets {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub neutral: Vec<usize>,
}

impl WordSets {
    /// The first 14 positive, 12 negative and 18 neutral tokens of a
    /// valence dataset (fewer when the vocabulary is smaller).
    pub fn from_dataset(ds: &SequenceDataset) -> Result<Self> {
        if ds.valence.is_none() {
            return Err(Error::Analysis("word sets need a valence dataset".into()));
        }
        let take = |v: Valence, k: usize| ds.tokens_with(v).into_iter().take(k).collect();
        Ok(Self {
            positive: take(Valence::Positive, 14),
            negative: take(Valence::Negative, 12),
            neutral: take(Valence::Neutral, 18),
        })
    }
}

/// `sum_pos m(x) - sum_neg m(x) - sum_neu |m(x)|` where `m(x)` is the
/// readout margin after one transition from `h_star` on token `x`.
pub fn word_score(
    meta: &MetaModel,
    theta: &[f64],
    h_star: &[f64],
    words: &WordSets,
    group: usize,
) -> Result<f64> {
    let margins = |tokens: &[usize]| -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let xs = meta.token_embeddings(tokens)?;
        let hs = Tensor::from_rows(&vec![h_star.to_vec(); tokens.len()]);
        let next = meta.step(theta, &xs, &hs)?;
        let rows: Vec<Vec<f64>> = (0..tokens.len()).map(|r| next.row(r).to_vec()).collect();
        readout_margin(meta, group, &rows)
    };
    let pos: f64 = margins(&words.positive)?.iter().sum();
    let neg: f64 = margins(&words.negative)?.iter().sum();
    let neu: f64 = margins(&words.neutral)?.iter().map(|m| m.abs()).sum();
    Ok(pos - neg - neu)
}

/// Inputs shared by every node of a score map.
#[derive(Debug, Clone)]
pub struct ScoreMapInputs<'a> {
    pub group: usize,
    pub words: &'a WordSets,
    pub batch: &'a SeqBatch,
    pub samples_per_seq: usize,
    pub x_star: &'a [f64],
    pub options: FixedPointOptions,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNode {
    pub u: f64,
    pub v: f64,
    pub theta: Vec<f64>,
    /// `None` where no fixed point was found.
    pub score: Option<f64>,
}

/// Word score at the neutral fixed point of every grid node.
pub fn score_map(meta: &MetaModel, plane: &Plane, grid: &GridSpec, inp: &ScoreMapInputs) -> Result<Vec<ScoreNode>> {
    let coords: Vec<(f64, f64)> = (0..grid.nu)
        .flat_map(|i| (0..grid.nv).map(move |j| grid.node(i, j)))
        .collect();
    coords
        .par_iter()
        .map(|&(u, v)| {
            let theta = plane.point(u, v);
            let score = score_at(meta, &theta, inp)?;
            Ok(ScoreNode { u, v, theta, score })
        })
        .collect()
}

/// Word score at the neutral fixed point for one embedding.
pub fn score_at(meta: &MetaModel, theta: &[f64], inp: &ScoreMapInputs) -> Result<Option<f64>> {
    let cands = collect_candidates(meta, theta, inp.group, inp.batch, inp.samples_per_seq, inp.seed)?;
    let fps = find_fixed_points(meta, theta, inp.x_star, &cands, &inp.options)?;
    if fps.is_empty() {
        return Ok(None);
    }
    let h = neutral_fixed_point(&fps, meta, inp.group)?;
    word_score(meta, theta, &h, inp.words, inp.group).map(Some)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties); 0 when either side
/// is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

#[cfg(test)]
mod tests;
