//! The pipeline stages. A [`Run`] binds a validated config to an output
//! directory laid out as
//!
//! ```text
//! data/<task>.tsv, data/<task>.json      gen-data
//! bases/base_NNN.{json,bin}, *.csv       train-base
//! meta/meta.{json,bin}, *.csv            train-meta
//! analysis/                              analyze
//! ssl/                                   ssl
//! fixed_points/                          fixed-points
//! average/                               average
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dynamo_core::atlas::{
    accuracy_landscape, average_embeddings, classical_mds, components_for_variance, evaluate_at, fit_pca,
    outside_convex_hull, silhouette, ssl_optimize, svcca_distance, EmbeddingAtlas, GridSpec, Plane,
};
use dynamo_core::dynamics::{
    collect_candidates, find_fixed_points, readout_margin, score_map, summarize_attractor, ScoreMapInputs, WordSets,
};
use dynamo_core::models::{BaseModel, SeqBatch};
use dynamo_core::numgrad::Tensor;
use dynamo_core::tasks::{generate, load_dataset, save_dataset, split_dataset, SequenceDataset, Split};
use dynamo_core::trainer::{base_accuracy, train_base, train_meta, MetaTrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelRecord};
use crate::config::{ExperimentConfig, ModelPlan, Overrides, SeedStream, ThetaSource};
use crate::export::{num, write_csv, write_json};
use crate::{CliError, Result};

/// Stage selector; decides what `--steps` overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainBase,
    TrainMeta,
    Analyze,
    Ssl,
    FixedPoints,
    Average,
}

#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
}

/// Meta checkpoint contents used by the analysis stages.
pub struct LoadedMeta {
    pub state: MetaTrainState,
    pub records: Vec<ModelRecord>,
}

impl LoadedMeta {
    pub fn group_models(&self, group: usize) -> Vec<usize> {
        self.records.iter().filter(|r| r.task_group == group).map(|r| r.model_id).collect()
    }

    fn best_in(&self, ids: &[usize]) -> Option<usize> {
        ids.iter().copied().max_by(|&a, &b| {
            self.records[a].test_accuracy.total_cmp(&self.records[b].test_accuracy).then(b.cmp(&a))
        })
    }

    /// Embedding and task group named by `src`.
    pub fn resolve(&self, src: &ThetaSource) -> Result<(Vec<f64>, usize)> {
        match src {
            ThetaSource::Model(n) => {
                let r = self.records.get(*n).ok_or_else(|| CliError::Config(format!("no model {n}")))?;
                Ok((self.state.embeddings[*n].clone(), r.task_group))
            }
            ThetaSource::Centroid(variant) => {
                let ids: Vec<usize> =
                    self.records.iter().filter(|r| &r.variant == variant).map(|r| r.model_id).collect();
                let first = ids.first().ok_or_else(|| CliError::Config(format!("no models of variant {variant:?}")))?;
                let group = self.records[*first].task_group;
                let thetas: Vec<Vec<f64>> = ids.iter().map(|&i| self.state.embeddings[i].clone()).collect();
                Ok((average_embeddings(&thetas, None)?, group))
            }
            ThetaSource::Coords(c) => {
                self.state.meta.check_theta(c)?;
                let group = *self.state.meta.heads.keys().next().expect("meta-model has a head");
                Ok((c.clone(), group))
            }
            ThetaSource::Origin => {
                let group = *self.state.meta.heads.keys().next().expect("meta-model has a head");
                Ok((vec![0.0; self.state.meta.theta_dim], group))
            }
            ThetaSource::BestBase => {
                let all: Vec<usize> = (0..self.records.len()).collect();
                let n = self.best_in(&all).ok_or_else(|| CliError::Config("no base models".into()))?;
                Ok((self.state.embeddings[n].clone(), self.records[n].task_group))
            }
        }
    }

    /// Highest base test accuracy within a task group.
    pub fn best_base_accuracy(&self, group: usize) -> Option<f64> {
        self.best_in(&self.group_models(group)).map(|n| self.records[n].test_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub task: String,
    pub best_accuracy: f64,
    pub best_u: f64,
    pub best_v: f64,
    pub best_outside_hull: bool,
    pub max_base_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub spectrum: Vec<f64>,
    pub components_for_variance: usize,
    pub variance_threshold: f64,
    pub silhouette_by_variant: Option<f64>,
    pub silhouette_by_task: Option<f64>,
    pub landscapes: Vec<LandscapeSummary>,
    pub mds_silhouette_by_variant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslSummary {
    pub task: String,
    pub steps: usize,
    pub start_accuracy: f64,
    pub final_accuracy: f64,
    pub best_base_accuracy: f64,
    /// Final accuracy minus the best base accuracy.
    pub delta_vs_best_base: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSummary {
    pub theta: Vec<f64>,
    pub count: usize,
    pub max_residual: f64,
    pub extent: Option<f64>,
    pub thickness: Option<f64>,
    pub spearman: Option<f64>,
    pub score_nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageReport {
    pub model_ids: Vec<usize>,
    pub base_accuracies: Vec<f64>,
    pub meta_accuracies: Vec<f64>,
    pub theta: Vec<f64>,
    pub average_accuracy: f64,
}

fn theta_header(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}{i}")).collect()
}

fn nums(v: &[f64]) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|&x| num(x))
}

fn headers(fixed: &[&str], extra: &[String]) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).chain(extra.iter().cloned()).collect()
}

fn csv(path: &Path, hash: &str, header: &[String], rows: Vec<Vec<String>>) -> Result<()> {
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, hash, &h, rows)
}

fn batch_of(ds: &SequenceDataset, idx: &[usize]) -> Result<SeqBatch> {
    let seqs: Vec<&[usize]> = idx.iter().map(|&i| ds.sequences[i].as_slice()).collect();
    Ok(SeqBatch::new(&seqs)?)
}

impl Run {
    pub fn new(mut cfg: ExperimentConfig, out: impl Into<PathBuf>, o: &Overrides, stage: Stage) -> Result<Self> {
        cfg.apply(o);
        if let Some(steps) = o.steps {
            match stage {
                Stage::TrainMeta => cfg.meta_train.max_steps = steps,
                Stage::Ssl => cfg.analysis.ssl.steps = steps,
                Stage::FixedPoints => cfg.analysis.fixed_points.max_steps = steps,
                _ => log::warn!("--steps has no effect on this command"),
            }
        }
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self { cfg, out: out.into(), hash })
    }

    pub fn data_stem(&self, task: &str) -> PathBuf {
        self.out.join("data").join(task)
    }

    pub fn base_stem(&self, id: usize) -> PathBuf {
        self.out.join("bases").join(format!("base_{id:03}"))
    }

    pub fn meta_stem(&self) -> PathBuf {
        self.out.join("meta").join("meta")
    }

    /// Datasets with the split stored by `gen-data`, in task order.
    pub fn load_datasets(&self) -> Result<Vec<SequenceDataset>> {
        self.cfg
            .tasks
            .iter()
            .map(|t| {
                let stem = self.data_stem(&t.name);
                let (tsv, json) = (stem.with_extension("tsv"), stem.with_extension("json"));
                for p in [&tsv, &json] {
                    if !p.exists() {
                        return Err(CliError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
                    }
                }
                Ok(load_dataset(&tsv, &json)?)
            })
            .collect()
    }

    pub fn gen_data(&self) -> Result<()> {
        for (i, t) in self.cfg.tasks.iter().enumerate() {
            let ds = split_dataset(&generate(&t.spec)?, t.fractions(), self.cfg.split_seed(i))?;
            let stem = self.data_stem(&t.name);
            if let Some(dir) = stem.parent() {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            save_dataset(&ds, &stem.with_extension("tsv"), &stem.with_extension("json"))?;
            log::info!("task {}: {} examples written to {}", t.name, ds.len(), stem.display());
        }
        Ok(())
    }

    /// Trains one base model from its plan; the result is quantized to
    /// `f32` so the saved checkpoint reproduces it exactly.
    pub fn train_one_base(
        &self,
        plan: &ModelPlan,
        ds: &SequenceDataset,
    ) -> Result<(BaseModel, dynamo_core::trainer::BaseReport, f64)> {
        let task = &self.cfg.tasks[plan.task_group];
        let fr = task.fractions();
        let fr = fr.with_subfraction(fr.base_subfraction * plan.base_fraction);
        let ds = split_dataset(ds, fr, self.cfg.split_seed(plan.task_group))?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let mut model = BaseModel::new(
            plan.kind,
            ds.vocab_size,
            plan.input_dim,
            plan.hidden_dim,
            plan.output_dim,
            plan.blocks,
            plan.task_group,
            &mut rng,
        )?;
        let cfg = dynamo_core::trainer::TrainConfig { seed: plan.seed, ..self.cfg.base_train.clone() };
        let report = train_base(&mut model, &ds, &cfg)?;
        model.quantize_f32();
        let acc = base_accuracy(&model, &ds, &ds.require(Split::Test)?)?;
        Ok((model, report, acc))
    }

    pub fn train_base(&self) -> Result<()> {
        let datasets = self.load_datasets()?;
        let plans = self.cfg.plans();
        let trained = plans
            .par_iter()
            .map(|p| self.train_one_base(p, &datasets[p.task_group]))
            .collect::<Result<Vec<_>>>()?;
        let mut metrics = Vec::new();
        let mut summary = Vec::new();
        for (plan, (model, report, acc)) in plans.iter().zip(&trained) {
            let record = ModelRecord {
                model_id: plan.model_id,
                variant: plan.variant.clone(),
                task: plan.task.clone(),
                task_group: plan.task_group,
                base_fraction: plan.base_fraction,
                test_accuracy: *acc,
                theta: Vec::new(),
            };
            Checkpoint::from_base(model, record, plan.seed, &self.hash).save(&self.base_stem(plan.model_id))?;
            for (e, (l, a)) in report.loss_curve.iter().zip(&report.accuracy_curve).enumerate() {
                metrics.push(vec![plan.model_id.to_string(), plan.variant.clone(), (e + 1).to_string(), num(*l), num(*a)]);
            }
            summary.push(vec![
                plan.model_id.to_string(),
                plan.variant.clone(),
                plan.task.clone(),
                num(plan.base_fraction),
                num(*acc),
            ]);
            log::info!("base {} ({}): test accuracy {acc:.4}", plan.model_id, plan.variant);
        }
        let dir = self.out.join("bases");
        write_csv(&dir.join("metrics.csv"), &self.hash, &["model_id", "variant", "epoch", "loss", "test_accuracy"], metrics)?;
        write_csv(
            &dir.join("summary.csv"),
            &self.hash,
            &["model_id", "variant", "task", "base_fraction", "test_accuracy"],
            summary,
        )
    }

    pub fn load_bases(&self) -> Result<(Vec<BaseModel>, Vec<ModelRecord>)> {
        let plans = self.cfg.plans();
        let mut bases = Vec::with_capacity(plans.len());
        let mut records = Vec::with_capacity(plans.len());
        for p in &plans {
            let ck = Checkpoint::load(&self.base_stem(p.model_id))?;
            let record = ck
                .manifest
                .models
                .first()
                .cloned()
                .ok_or_else(|| CliError::Config(format!("base checkpoint {} has no record", p.model_id)))?;
            if record.model_id != p.model_id || record.variant != p.variant {
                return Err(CliError::Config(format!(
                    "base checkpoint {} does not match the configured population",
                    p.model_id
                )));
            }
            bases.push(ck.to_base()?);
            records.push(record);
        }
        Ok((bases, records))
    }

    pub fn train_meta(&self) -> Result<()> {
        let datasets = self.load_datasets()?;
        let (bases, records) = self.load_bases()?;
        let m = &self.cfg.meta;
        let state = MetaTrainState::init(
            &bases,
            m.input_dim,
            m.theta_dim,
            m.hidden_dim,
            self.cfg.derive_seed(SeedStream::MetaInit, 0),
        )?;
        let per_model: Vec<&SequenceDataset> = bases.iter().map(|b| &datasets[b.task_group]).collect();
        let cfg = dynamo_core::trainer::TrainConfig {
            seed: self.cfg.derive_seed(SeedStream::MetaTrain, 0),
            ..self.cfg.meta_train.clone()
        };
        let mut state = train_meta(state, &bases, &per_model, &cfg)?;
        let history = std::mem::take(&mut state.history);
        state.quantize_f32();
        let dir = self.out.join("meta");
        write_csv(
            &dir.join("loss.csv"),
            &self.hash,
            &["step", "model_id", "hidden_loss", "output_loss", "total_loss"],
            history.iter().map(|r| {
                vec![r.step.to_string(), r.model_id.to_string(), num(r.hidden_loss), num(r.output_loss), num(r.total_loss)]
            }),
        )?;
        let mut eval = Vec::new();
        for (n, r) in records.iter().enumerate() {
            let ds = &datasets[r.task_group];
            let acc = evaluate_at(&state.meta, &state.embeddings[n], r.task_group, ds, &ds.require(Split::Test)?, None)?;
            eval.push(vec![n.to_string(), r.variant.clone(), r.task.clone(), num(r.test_accuracy), num(acc.accuracy)]);
        }
        write_csv(
            &dir.join("evaluation.csv"),
            &self.hash,
            &["model_id", "variant", "task", "base_accuracy", "meta_accuracy"],
            eval,
        )?;
        let d = state.meta.theta_dim;
        csv(
            &dir.join("embeddings.csv"),
            &self.hash,
            &headers(&["model_id", "variant"], &theta_header("theta_", d)),
            records
                .iter()
                .zip(&state.embeddings)
                .map(|(r, th)| [r.model_id.to_string(), r.variant.clone()].into_iter().chain(nums(th)).collect())
                .collect(),
        )?;
        Checkpoint::from_meta(&state, records, self.cfg.derive_seed(SeedStream::MetaInit, 0), &self.hash)
            .save(&self.meta_stem())
    }

    pub fn load_meta(&self) -> Result<LoadedMeta> {
        let ck = Checkpoint::load(&self.meta_stem())?;
        let state = ck.to_meta()?;
        Ok(LoadedMeta { state, records: ck.manifest.models })
    }

    pub fn analyze(&self) -> Result<AnalysisSummary> {
        let datasets = self.load_datasets()?;
        let lm = self.load_meta()?;
        let dir = self.out.join("analysis");
        let opts = &self.cfg.analysis;
        let atlas = fit_pca(&lm.state.embeddings)?;
        let total: f64 = atlas.spectrum.iter().sum();
        csv(
            &dir.join("spectrum.csv"),
            &self.hash,
            &headers(&["component", "variance", "explained_ratio"], &[]),
            atlas
                .spectrum
                .iter()
                .enumerate()
                .map(|(i, &v)| vec![(i + 1).to_string(), num(v), num(if total > 0.0 { v / total } else { 0.0 })])
                .collect(),
        )?;
        let d = atlas.dim();
        let coords: Vec<Vec<f64>> = lm.state.embeddings.iter().map(|t| atlas.project(t)).collect();
        csv(
            &dir.join("atlas.csv"),
            &self.hash,
            &headers(&["model_id", "variant", "task"], &theta_header("pc", d)),
            lm.records
                .iter()
                .zip(&coords)
                .map(|(r, c)| [r.model_id.to_string(), r.variant.clone(), r.task.clone()].into_iter().chain(nums(c)).collect())
                .collect(),
        )?;
        let k = components_for_variance(&atlas.spectrum, opts.variance_threshold)?;
        let top2 = atlas.top_k(2.min(d));
        let by_variant = labels_of(lm.records.iter().map(|r| r.variant.as_str()));
        let by_task = labels_of(lm.records.iter().map(|r| r.task.as_str()));
        let sil = |labels: &[usize], pts: &[Vec<f64>]| -> Result<Option<f64>> {
            if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
                return Ok(None);
            }
            Ok(Some(silhouette(pts, labels)?))
        };
        let mut summary = AnalysisSummary {
            spectrum: atlas.spectrum.clone(),
            components_for_variance: k,
            variance_threshold: opts.variance_threshold,
            silhouette_by_variant: sil(&by_variant, &top2)?,
            silhouette_by_task: sil(&by_task, &top2)?,
            landscapes: Vec::new(),
            mds_silhouette_by_variant: None,
        };
        if d >= 2 {
            for (g, task) in self.cfg.tasks.iter().enumerate() {
                let ids = lm.group_models(g);
                if ids.is_empty() {
                    continue;
                }
                let s = self.landscape(&lm, &atlas, g, &ids, &datasets[g], &dir.join(format!("landscape_{}.csv", task.name)))?;
                summary.landscapes.push(s);
            }
        }
        if opts.activations {
            summary.mds_silhouette_by_variant = self.svcca_mds(&datasets, &by_variant, &dir)?;
        }
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    fn landscape(
        &self,
        lm: &LoadedMeta,
        atlas: &EmbeddingAtlas,
        group: usize,
        ids: &[usize],
        ds: &SequenceDataset,
        path: &Path,
    ) -> Result<LandscapeSummary> {
        let plane = Plane::from_atlas(atlas)?;
        let pts: Vec<(f64, f64)> = ids.iter().map(|&i| plane.coords(&lm.state.embeddings[i])).collect();
        let n = self.cfg.analysis.grid;
        let grid = GridSpec::covering(&pts, self.cfg.analysis.extent_factor, n, n);
        let land = accuracy_landscape(&lm.state.meta, &plane, &grid, group, ds, &ds.require(Split::Test)?)?;
        csv(
            path,
            &self.hash,
            &headers(&["u", "v", "accuracy", "outside_hull"], &[]),
            land.nodes
                .iter()
                .map(|nd| vec![num(nd.u), num(nd.v), num(nd.accuracy), outside_convex_hull((nd.u, nd.v), &pts).to_string()])
                .collect(),
        )?;
        let best = land.best();
        Ok(LandscapeSummary {
            task: self.cfg.tasks[group].name.clone(),
            best_accuracy: best.accuracy,
            best_u: best.u,
            best_v: best.v,
            best_outside_hull: outside_convex_hull((best.u, best.v), &pts),
            max_base_accuracy: lm.best_base_accuracy(group).unwrap_or(0.0),
        })
    }

    /// Pairwise SVCCA distances between base-model activations on shared
    /// inputs, embedded in 2-D by classical MDS.
    fn svcca_mds(&self, datasets: &[SequenceDataset], labels: &[usize], dir: &Path) -> Result<Option<f64>> {
        let (bases, records) = self.load_bases()?;
        let n = bases.len();
        log::warn!("SVCCA comparison of {n} models needs {} pairwise decompositions", n * (n - 1) / 2);
        let ds = &datasets[0];
        let test = ds.require(Split::Test)?;
        let idx = &test[..self.cfg.analysis.activation_examples.min(test.len()).max(1)];
        let batch = batch_of(ds, idx)?;
        let acts = bases
            .iter()
            .map(|b| {
                let tr = b.rollout(&batch)?;
                let rows: Vec<Vec<f64>> = (0..tr.batch)
                    .flat_map(|s| (0..tr.lengths[s]).map(move |t| (t, s)))
                    .map(|(t, s)| tr.hidden_at(t, s).to_vec())
                    .collect();
                Ok(Tensor::from_rows(&rows))
            })
            .collect::<Result<Vec<_>>>()?;
        if acts.iter().any(|a| a.rows() != acts[0].rows()) {
            return Err(CliError::Config("activation dumps need models with matching step counts".into()));
        }
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let dists = pairs
            .par_iter()
            .map(|&(i, j)| {
                let dims = self.cfg.analysis.svcca_dims.min(acts[i].cols()).min(acts[j].cols()).min(acts[i].rows());
                Ok(svcca_distance(&acts[i], &acts[j], dims)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut dm = Tensor::zeros(&[n, n]);
        for (&(i, j), &v) in pairs.iter().zip(&dists) {
            dm.data_mut()[i * n + j] = v;
            dm.data_mut()[j * n + i] = v;
        }
        csv(
            &dir.join("svcca.csv"),
            &self.hash,
            &headers(&["model_a", "model_b", "distance"], &[]),
            pairs.iter().zip(&dists).map(|(&(i, j), &v)| vec![i.to_string(), j.to_string(), num(v)]).collect(),
        )?;
        let emb = classical_mds(&dm, 2.min(n))?;
        let pts: Vec<Vec<f64>> = (0..n).map(|i| emb.row(i).to_vec()).collect();
        csv(
            &dir.join("mds.csv"),
            &self.hash,
            &headers(&["model_id", "variant"], &theta_header("x", emb.cols())),
            records
                .iter()
                .zip(&pts)
                .map(|(r, p)| [r.model_id.to_string(), r.variant.clone()].into_iter().chain(nums(p)).collect())
                .collect(),
        )?;
        if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
            return Ok(None);
        }
        Ok(Some(silhouette(&pts, labels)?))
    }

    pub fn ssl(&self) -> Result<SslSummary> {
        let datasets = self.load_datasets()?;
        let lm = self.load_meta()?;
        let o = &self.cfg.analysis.ssl;
        let (theta0, group) = lm.resolve(&o.start)?;
        let ds = &datasets[group];
        let labeled = ds.require(Split::SslLabeled)?;
        let test = ds.require(Split::Test)?;
        let meta = &lm.state.meta;
        let before = meta.params.clone();
        let (theta, traj) = ssl_optimize(meta, group, ds, &labeled, &theta0, o.steps, o.lr)?;
        if meta.params != before {
            return Err(CliError::Numeric("meta-model parameters changed during embedding search".into()));
        }
        log::info!("meta-model parameters unchanged by embedding search");
        if traj.iter().any(|s| !s.loss.is_finite()) {
            return Err(CliError::Numeric("non-finite loss during embedding search".into()));
        }
        let accs = traj
            .par_iter()
            .map(|s| Ok(evaluate_at(meta, &s.theta, group, ds, &test, None)?.accuracy))
            .collect::<Result<Vec<f64>>>()?;
        let d = meta.theta_dim;
        let dir = self.out.join("ssl");
        csv(
            &dir.join("trajectory.csv"),
            &self.hash,
            &headers(&["step", "loss", "lr", "test_accuracy"], &theta_header("theta_", d)),
            traj.iter()
                .zip(&accs)
                .map(|(s, a)| [s.step.to_string(), num(s.loss), num(s.lr), num(*a)].into_iter().chain(nums(&s.theta)).collect())
                .collect(),
        )?;
        let best = lm.best_base_accuracy(group).unwrap_or(0.0);
        let last = accs.last().copied().unwrap_or(0.0);
        let summary = SslSummary {
            task: self.cfg.tasks[group].name.clone(),
            steps: o.steps,
            start_accuracy: accs[0],
            final_accuracy: last,
            best_base_accuracy: best,
            delta_vs_best_base: last - best,
            initial_loss: traj[0].loss,
            final_loss: traj.last().map_or(traj[0].loss, |s| s.loss),
            theta,
        };
        log::info!("embedding search: accuracy {last:.4}, {:+.4} against the best base model", summary.delta_vs_best_base);
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    pub fn fixed_points(&self, source: Option<ThetaSource>) -> Result<FixedPointSummary> {
        let datasets = self.load_datasets()?;
        let lm = self.load_meta()?;
        let fc = &self.cfg.analysis.fixed_points;
        let (theta, group) = lm.resolve(source.as_ref().unwrap_or(&fc.theta))?;
        let meta = &lm.state.meta;
        let ds = &datasets[group];
        let test = ds.require(Split::Test)?;
        let batch = batch_of(ds, &test[..fc.candidate_sequences.clamp(1, test.len())])?;
        let seed = self.cfg.derive_seed(SeedStream::Analysis, 0);
        let x_star = fc.x_star.clone().unwrap_or_else(|| vec![0.0; meta.input_dim]);
        let cands = collect_candidates(meta, &theta, group, &batch, fc.samples_per_seq, seed)?;
        let fps = find_fixed_points(meta, &theta, &x_star, &cands, &fc.options())?;
        let margins = if fps.is_empty() { Vec::new() } else { readout_margin(meta, group, &fps.points)? };
        let attractor = if fps.len() >= 2 { Some(summarize_attractor(&fps, meta, group)?) } else { None };
        let dir = self.out.join("fixed_points");
        let axis_pos = |p: &[f64]| attractor.as_ref().map(|a| a.axis.iter().zip(p).map(|(x, y)| x * y).sum::<f64>());
        csv(
            &dir.join("fixed_points.csv"),
            &self.hash,
            &headers(&["index", "residual", "readout_margin", "axis_position", "candidate", "steps"], &theta_header("h", meta.hidden_dim)),
            (0..fps.len())
                .map(|i| {
                    [
                        i.to_string(),
                        num(fps.residuals[i]),
                        num(margins[i]),
                        axis_pos(&fps.points[i]).map(num).unwrap_or_default(),
                        fps.candidate[i].to_string(),
                        fps.steps[i].to_string(),
                    ]
                    .into_iter()
                    .chain(nums(&fps.points[i]))
                    .collect()
                })
                .collect(),
        )?;
        let mut score_nodes = 0;
        if fc.score_grid > 0 && ds.valence.is_some() && meta.theta_dim >= 2 {
            let atlas = fit_pca(&lm.state.embeddings)?;
            let plane = Plane::from_atlas(&atlas)?;
            let ids = lm.group_models(group);
            let pts: Vec<(f64, f64)> = ids.iter().map(|&i| plane.coords(&lm.state.embeddings[i])).collect();
            let grid = GridSpec::covering(&pts, self.cfg.analysis.extent_factor, fc.score_grid, fc.score_grid);
            let words = WordSets::from_dataset(ds)?;
            let inp = ScoreMapInputs {
                group,
                words: &words,
                batch: &batch,
                samples_per_seq: fc.samples_per_seq,
                x_star: &x_star,
                options: fc.options(),
                seed,
            };
            let nodes = score_map(meta, &plane, &grid, &inp)?;
            score_nodes = nodes.len();
            csv(
                &dir.join("score_map.csv"),
                &self.hash,
                &headers(&["u", "v", "score"], &[]),
                nodes.iter().map(|n| vec![num(n.u), num(n.v), n.score.map(num).unwrap_or_default()]).collect(),
            )?;
        }
        let summary = FixedPointSummary {
            theta,
            count: fps.len(),
            max_residual: fps.residuals.iter().copied().fold(0.0, f64::max),
            extent: attractor.as_ref().map(|a| a.extent),
            thickness: attractor.as_ref().map(|a| a.thickness),
            spearman: attractor.as_ref().map(|a| a.spearman),
            score_nodes,
        };
        write_json(&dir.join("summary.json"), &summary)?;
        Ok(summary)
    }

    pub fn average(&self, ids: Option<Vec<usize>>) -> Result<AverageReport> {
        let ids = ids.unwrap_or_else(|| self.cfg.analysis.average.clone());
        if ids.is_empty() {
            return Err(CliError::Config("no model ids to average".into()));
        }
        let datasets = self.load_datasets()?;
        let lm = self.load_meta()?;
        let mut group = None;
        for &i in &ids {
            let r = lm.records.get(i).ok_or_else(|| CliError::Config(format!("no model {i}")))?;
            if group.is_some_and(|g| g != r.task_group) {
                return Err(CliError::Config("averaged models must share a task group".into()));
            }
            group = Some(r.task_group);
        }
        let group = group.expect("non-empty ids");
        let ds = &datasets[group];
        let test = ds.require(Split::Test)?;
        let meta = &lm.state.meta;
        let thetas: Vec<Vec<f64>> = ids.iter().map(|&i| lm.state.embeddings[i].clone()).collect();
        let theta = average_embeddings(&thetas, None)?;
        let meta_accs = thetas
            .iter()
            .map(|t| Ok(evaluate_at(meta, t, group, ds, &test, None)?.accuracy))
            .collect::<Result<Vec<f64>>>()?;
        let average_accuracy = evaluate_at(meta, &theta, group, ds, &test, None)?.accuracy;
        let report = AverageReport {
            base_accuracies: ids.iter().map(|&i| lm.records[i].test_accuracy).collect(),
            meta_accuracies: meta_accs,
            model_ids: ids,
            theta,
            average_accuracy,
        };
        let mut rows: Vec<Vec<String>> = report
            .model_ids
            .iter()
            .enumerate()
            .map(|(k, &i)| vec![i.to_string(), num(report.base_accuracies[k]), num(report.meta_accuracies[k])])
            .collect();
        rows.push(vec!["average".into(), String::new(), num(average_accuracy)]);
        write_csv(&self.out.join("average").join("report.csv"), &self.hash, &["model", "base_accuracy", "meta_accuracy"], rows)?;
        Ok(report)
    }
}

/// Dense labels in order of first appearance.
fn labels_of<'a>(names: impl Iterator<Item = &'a str>) -> Vec<usize> {
    let mut seen: Vec<&str> = Vec::new();
    names
        .map(|n| match seen.iter().position(|s| *s == n) {
            Some(i) => i,
            None => {
                seen.push(n);
                seen.len() - 1
            }
        })
        .collect()
}

