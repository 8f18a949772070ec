//! Analysis of a learned embedding space.
//!
//! Covers PCA of the embeddings, averaging, accuracy landscapes over a 2-D
//! plane, semi-supervised search over the embedding alone, an SVCCA plus
//! MDS baseline for comparing networks directly, and cluster quality.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{MetaModel, SeqBatch};
use crate::numgrad::{Bindings, Graph, Layers, Prefixed, Tensor};
use crate::tasks::SequenceDataset;
use crate::trainer::task_loss_node;

/// PCA of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingAtlas {
    pub embeddings: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Principal axes as rows, ordered by descending eigenvalue.
    pub axes: Vec<Vec<f64>>,
    /// Covariance eigenvalues (divisor N), descending.
    pub spectrum: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_rect(rows: &[Vec<f64>]) -> Result<usize> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("points must be non-empty and of equal dimension".into()));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite coordinate".into()));
    }
    Ok(d)
}

pub fn fit_pca(embeddings: &[Vec<f64>]) -> Result<EmbeddingAtlas> {
    if embeddings.len() < 2 {
        return Err(Error::Analysis("PCA needs at least two embeddings".into()));
    }
    let d = check_rect(embeddings)?;
    let n = embeddings.len();
    let mean: Vec<f64> = (0..d)
        .map(|j| embeddings.iter().map(|e| e[j]).sum::<f64>() / n as f64)
        .collect();
    // pad with zero rows so the thin SVD returns all d right singular vectors
    let rows = n.max(d);
    let mut x = DMatrix::<f64>::zeros(rows, d);
    for (i, e) in embeddings.iter().enumerate() {
        for j in 0..d {
            x[(i, j)] = e[j] - mean[j];
        }
    }
    let svd = x.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let mut pairs: Vec<(Vec<f64>, f64)> = (0..d)
        .map(|k| {
            let mut axis: Vec<f64> = (0..d).map(|j| vt[(k, j)]).collect();
            let big = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if big < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
            // variance along the axis; avoids squaring the singular value
            let var = embeddings
                .iter()
                .map(|e| e.iter().zip(&mean).zip(&axis).map(|((x, m), a)| (x - m) * a).sum::<f64>().powi(2))
                .sum::<f64>()
                / n as f64;
            (axis, var)
        })
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (axes, spectrum): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(EmbeddingAtlas { embeddings: embeddings.to_vec(), mean, axes, spectrum })
}

impl EmbeddingAtlas {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Coordinates of `theta` along every principal axis.
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = theta.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.axes.iter().map(|ax| dot(ax, &c)).collect()
    }

    /// Inverse of [`project`](Self::project).
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, ax) in coords.iter().zip(&self.axes) {
            for (o, a) in out.iter_mut().zip(ax) {
                *o += c * a;
            }
        }
        out
    }

    /// First `k` projections of every stored embedding.
    pub fn top_k(&self, k: usize) -> Vec<Vec<f64>> {
        self.embeddings.iter().map(|e| self.project(e)[..k.min(self.dim())].to_vec()).collect()
    }
}

/// Smallest `k` whose leading eigenvalues explain `threshold` of the total.
pub fn components_for_variance(spectrum: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Analysis(format!("threshold {threshold} outside (0, 1]")));
    }
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (k, v) in spectrum.iter().enumerate() {
        acc += v;
        if acc / total >= threshold - 1e-12 {
            return Ok(k + 1);
        }
    }
    Ok(spectrum.len())
}

/// Arithmetic mean of embeddings, optionally weighted.
pub fn average_embeddings(thetas: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let d = check_rect(thetas).map_err(|_| Error::Analysis("cannot average an empty set".into()))?;
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != thetas.len() || w.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Analysis("weights must be non-negative, one per embedding".into()));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Analysis("weights must sum to 1".into()));
            }
            w.to_vec()
        }
        None => vec![1.0 / thetas.len() as f64; thetas.len()],
    };
    Ok((0..d).map(|j| thetas.iter().zip(&w).map(|(t, wi)| t[j] * wi).sum()).collect())
}

/// Accuracy of the meta-model at one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy divided by the best base-model accuracy, when supplied.
    pub relative: Option<f64>,
}

/// Final-step accuracy of the meta-model conditioned on `theta`, using the
/// readout head of `group`, over examples `idx` of `ds`.
pub fn evaluate_at(
    meta: &MetaModel,
    theta: &[f64],
    group: usize,
    ds: &SequenceDataset,
    idx: &[usize],
    best_base: Option<f64>,
) -> Result<Evaluation> {
    if idx.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    let mut correct = 0;
    for chunk in idx.chunks(256) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&i| ds.sequences[i].as_slice()).collect();
        let preds = meta.rollout(theta, group, &SeqBatch::new(&seqs)?)?.predictions();
        correct += preds.iter().zip(chunk).filter(|(p, &i)| **p == ds.labels[i]).count();
    }
    let accuracy = correct as f64 / idx.len() as f64;
    Ok(Evaluation { accuracy, relative: best_base.filter(|&b| b > 0.0).map(|b| accuracy / b) })
}

/// Affine 2-plane `origin + a u + b v` in embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Plane {
    /// Top-two PCA plane through the embedding mean.
    pub fn from_atlas(atlas: &EmbeddingAtlas) -> Result<Self> {
        if atlas.dim() < 2 {
            return Err(Error::Analysis("a 2-plane needs embedding dimension >= 2".into()));
        }
        Ok(Self { origin: atlas.mean.clone(), u: atlas.axes[0].clone(), v: atlas.axes[1].clone() })
    }

    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        (0..self.origin.len()).map(|j| self.origin[j] + a * self.u[j] + b * self.v[j]).collect()
    }

    /// Least-squares plane coordinates of `theta`.
    pub fn coords(&self, theta: &[f64]) -> (f64, f64) {
        let c: Vec<f64> = theta.iter().zip(&self.origin).map(|(t, o)| t - o).collect();
        let (uu, uv, vv) = (dot(&self.u, &self.u), dot(&self.u, &self.v), dot(&self.v, &self.v));
        let (cu, cv) = (dot(&c, &self.u), dot(&c, &self.v));
        let det = uu * vv - uv * uv;
        ((cu * vv - cv * uv) / det, (cv * uu - cu * uv) / det)
    }

    fn validate(&self) -> Result<()> {
        let d = self.origin.len();
        if self.u.len() != d || self.v.len() != d {
            return Err(Error::Shape("plane vectors must match the embedding dimension".into()));
        }
        let (nu, nv) = (dot(&self.u, &self.u).sqrt(), dot(&self.v, &self.v).sqrt());
        if nu < 1e-12 || nv < 1e-12 || (dot(&self.u, &self.v) / (nu * nv)).abs() > 1.0 - 1e-9 {
            return Err(Error::Analysis("plane basis is not linearly independent".into()));
        }
        Ok(())
    }
}

/// Grid of plane coordinates, `nu x nv` nodes spanning the given ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub u_min: f64,
    pub u_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub nu: usize,
    pub nv: usize,
}

impl GridSpec {
    /// Bounding box of `points` (plane coordinates) scaled by `factor`
    /// about its centre.
    pub fn covering(points: &[(f64, f64)], factor: f64, nu: usize, nv: usize) -> Self {
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(a, b) in points {
            u0 = u0.min(a);
            u1 = u1.max(a);
            v0 = v0.min(b);
            v1 = v1.max(b);
        }
        let (cu, cv) = ((u0 + u1) / 2.0, (v0 + v1) / 2.0);
        let (hu, hv) = ((u1 - u0) / 2.0 * factor, (v1 - v0) / 2.0 * factor);
        Self { u_min: cu - hu, u_max: cu + hu, v_min: cv - hv, v_max: cv + hv, nu, nv }
    }

    fn axis(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
        if n <= 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (n - 1) as f64
        }
    }

    /// Plane coordinates of node `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> (f64, f64) {
        (Self::axis(self.u_min, self.u_max, self.nu, i), Self::axis(self.v_min, self.v_max, self.nv, j))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeNode {
    pub u: f64,
    pub v: f64,
    pub theta: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub plane: Plane,
    pub grid: GridSpec,
    /// Nodes in row-major `(i, j)` order, `i` along `u`.
    pub nodes: Vec<LandscapeNode>,
    pub argmax: usize,
}

impl LandscapeGrid {
    pub fn best(&self) -> &LandscapeNode {
        &self.nodes[self.argmax]
    }
}

/// Evaluates the meta-model at every node of a plane grid.
pub fn accuracy_landscape(
    meta: &MetaModel,
    plane: &Plane,
    grid: &GridSpec,
    group: usize,
    ds: &SequenceDataset,
    idx: &[usize],
) -> Result<LandscapeGrid> {
    plane.validate()?;
    if grid.nu == 0 || grid.nv == 0 {
        return Err(Error::Analysis("grid resolution must be positive".into()));
    }
    let coords: Vec<(f64, f64)> = (0..grid.nu)
        .flat_map(|i| (0..grid.nv).map(move |j| grid.node(i, j)))
        .collect();
    let nodes = coords
        .par_iter()
        .map(|&(u, v)| {
            let theta = plane.point(u, v);
            let accuracy = evaluate_at(meta, &theta, group, ds, idx, None)?.accuracy;
            Ok(LandscapeNode { u, v, theta, accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut argmax = 0;
    for (k, n) in nodes.iter().enumerate() {
        if n.accuracy > nodes[argmax].accuracy {
            argmax = k;
        }
    }
    Ok(LandscapeGrid { plane: plane.clone(), grid: *grid, nodes, argmax })
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (counter-clockwise, no collinear points) by monotone chain.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    p.dedup();
    if p.len() < 3 {
        return p;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * p.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(p.iter()) } else { Box::new(p.iter().rev()) };
        for &q in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
                hull.pop();
            }
            hull.push(q);
        }
        hull.pop();
    }
    hull
}

/// Whether `q` lies strictly outside the convex hull of `points`.
pub fn outside_convex_hull(q: (f64, f64), points: &[(f64, f64)]) -> bool {
    let hull = convex_hull(points);
    match hull.len() {
        0 => true,
        1 => dist(&[q.0, q.1], &[hull[0].0, hull[0].1]) > 1e-12,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let on_line = cross(a, b, q).abs() <= 1e-12;
            let within = (q.0 - a.0) * (q.0 - b.0) + (q.1 - a.1) * (q.1 - b.1) <= 1e-12;
            !(on_line && within)
        }
        n => (0..n).any(|k| cross(hull[k], hull[(k + 1) % n], q) < -1e-12),
    }
}

/// One iterate of the embedding search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslStep {
    pub step: usize,
    pub theta: Vec<f64>,
    pub loss: f64,
    pub lr: f64,
}

/// Mean final-step cross-entropy on `idx` and its gradient in `theta`.
pub fn ssl_loss(
    meta: &MetaModel,
    group: usize,
    ds: &SequenceDataset,
    idx: &[usize],
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    meta.check_theta(theta)?;
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| ds.sequences[i].as_slice()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    let batch = SeqBatch::new(&seqs)?;
    let mut g = Graph::new();
    let th = g.leaf("theta");
    let nodes = meta.build_rollout(&mut g, "meta.", th, group, &batch)?;
    let loss = task_loss_node(&mut g, nodes.logits, &meta.lengths(&batch), &labels);
    let mut tb = Bindings::new();
    tb.insert("theta".into(), Tensor::vector(theta.to_vec()));
    let meta_b = Prefixed { prefix: "meta.", inner: &meta.params };
    let value = g.forward(loss, &Layers(vec![&meta_b, &tb]))?.item();
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite search loss".into()));
    }
    let grads = g.backward(1.0)?;
    Ok((value, grads["theta"].data().to_vec()))
}

/// Gradient descent on the labeled loss with respect to `theta` only. A
/// step that would increase the loss is retried with half the rate, so the
/// recorded losses never increase. Returns the final embedding and every
/// iterate (the initial point first).
pub fn ssl_optimize(
    meta: &MetaModel,
    group: usize,
    ds: &SequenceDataset,
    labeled: &[usize],
    theta_init: &[f64],
    steps: usize,
    lr: f64,
) -> Result<(Vec<f64>, Vec<SslStep>)> {
    if labeled.is_empty() {
        return Err(Error::EmptySplit("ssl_labeled"));
    }
    if !(lr > 0.0) {
        return Err(Error::Config("learning rate must be positive".into()));
    }
    let mut theta = theta_init.to_vec();
    let (mut loss, mut grad) = ssl_loss(meta, group, ds, labeled, &theta)?;
    let mut rate = lr;
    let mut traj = vec![SslStep { step: 0, theta: theta.clone(), loss, lr: rate }];
    for step in 1..=steps {
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - rate * g).collect();
            let (l, g) = ssl_loss(meta, group, ds, labeled, &cand)?;
            if l <= loss {
                theta = cand;
                loss = l;
                grad = g;
                accepted = true;
                break;
            }
            rate /= 2.0;
        }
        if !accepted {
            log::debug!("embedding search stalled at step {step}");
        }
        traj.push(SslStep { step, theta: theta.clone(), loss, lr: rate });
    }
    Ok((theta, traj))
}

/// Centered copy of a row-major `S x p` matrix.
fn centered(t: &Tensor) -> DMatrix<f64> {
    let (s, p) = (t.rows(), t.cols());
    let mut m = DMatrix::from_row_slice(s, p, t.data());
    for j in 0..p {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    m
}

/// Orthonormal basis of the leading directions that explain 99% of the
/// variance, at most `cap` of them.
fn reduce(m: &DMatrix<f64>, cap: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let var: Vec<f64> = order.iter().map(|&k| svd.singular_values[k].powi(2)).collect();
    let total: f64 = var.iter().sum();
    let scale = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let mut keep = 0;
    let mut acc = 0.0;
    for v in &var {
        if keep >= cap || acc >= 0.99 * total {
            break;
        }
        if v.sqrt() <= 1e-10 * scale.max(1e-300) {
            log::warn!("activation matrix is rank deficient; keeping {keep} directions");
            break;
        }
        acc += v;
        keep += 1;
    }
    let cols: Vec<_> = order[..keep].iter().map(|&k| u.column(k).into_owned()).collect();
    DMatrix::from_columns(&cols)
}

/// `sqrt(mean_k 2 (1 - rho_k))` over the canonical correlations of the
/// SVD-reduced activations.
pub fn svcca_distance(a: &Tensor, b: &Tensor, dims_kept: usize) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!("{} vs {} samples", a.rows(), b.rows())));
    }
    if dims_kept == 0 || dims_kept > a.cols().min(b.cols()).min(a.rows()) {
        return Err(Error::Analysis(format!("dims_kept {dims_kept} out of range")));
    }
    let (ua, ub) = (reduce(&centered(a), dims_kept), reduce(&centered(b), dims_kept));
    if ua.ncols() == 0 || ub.ncols() == 0 {
        return Err(Error::Analysis("activations have no variance".into()));
    }
    let rho = (ua.transpose() * ub).singular_values();
    let k = rho.len();
    let mean = rho.iter().map(|r| 2.0 * (1.0 - r.min(1.0))).sum::<f64>() / k as f64;
    Ok(mean.max(0.0).sqrt())
}

/// Classical (Torgerson) MDS of a distance matrix into `out_dim` dimensions.
pub fn classical_mds(d: &Tensor, out_dim: usize) -> Result<Tensor> {
    let n = d.rows();
    if d.cols() != n || (d.shape().len() == 1 && n != 1) {
        return Err(Error::Shape("distance matrix must be square".into()));
    }
    let x = d.data();
    for i in 0..n {
        if x[i * n + i].abs() > 1e-12 {
            return Err(Error::Analysis("distance matrix needs a zero diagonal".into()));
        }
        for j in 0..n {
            if (x[i * n + j] - x[j * n + i]).abs() > 1e-9 * (1.0 + x[i * n + j].abs()) {
                return Err(Error::Analysis("distance matrix is not symmetric".into()));
            }
            if x[i * n + j] < 0.0 {
                return Err(Error::Analysis("distances must be non-negative".into()));
            }
        }
    }
    let sq = DMatrix::from_fn(n, n, |i, j| x[i * n + j].powi(2));
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).mean()).collect();
    let all = sq.mean();
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - row_mean[j] + all));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let mut out = vec![0.0; n * out_dim];
    for (k, &e) in order.iter().take(out_dim).enumerate() {
        let mut lambda = eig.eigenvalues[e];
        if lambda < 0.0 {
            if lambda < -1e-9 {
                log::warn!("clamping negative MDS eigenvalue {lambda}");
            }
            lambda = 0.0;
        }
        let s = lambda.sqrt();
        for i in 0..n {
            out[i * out_dim + k] = eig.eigenvectors[(i, e)] * s;
        }
    }
    Ok(Tensor::matrix(n, out_dim.max(1), if out_dim == 0 { vec![0.0; n] } else { out }))
}

/// Mean silhouette with Euclidean distances; members of singleton clusters
/// score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Shape("one label per point".into()));
    }
    check_rect(points)?;
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::Analysis("silhouette needs at least two clusters".into()));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![(0.0, 0usize); clusters.len()];
        for j in 0..n {
            if i != j {
                let c = clusters.binary_search(&labels[j]).expect("known label");
                sums[c].0 += dist(&points[i], &points[j]);
                sums[c].1 += 1;
            }
        }
        let own = clusters.binary_search(&labels[i]).expect("known label");
        if sums[own].1 == 0 {
            continue;
        }
        let a = sums[own].0 / sums[own].1 as f64;
        let b = sums
            .iter()
            .enumerate()
            .filter(|(c, s)| *c != own && s.1 > 0)
            .map(|(_, s)| s.0 / s.1 as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests;
