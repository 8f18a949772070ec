//! Experiment configuration: one JSON file drives every stage.

use std::collections::BTreeSet;
use std::path::Path;

use dynamo_core::dynamics::FixedPointOptions;
use dynamo_core::models::CellKind;
use dynamo_core::tasks::{SplitFractions, TaskSpec};
use dynamo_core::trainer::{HiddenMetric, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; splits, initializations and training order derive from it.
    #[serde(default)]
    pub seed: u64,
    pub tasks: Vec<TaskEntry>,
    pub population: Vec<PopulationEntry>,
    #[serde(default)]
    pub base_train: TrainConfig,
    #[serde(default)]
    pub meta_train: TrainConfig,
    pub meta: MetaSpec,
    #[serde(default)]
    pub analysis: AnalysisOptions,
}

/// A task and its split. The task's position in `tasks` is its task group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub spec: TaskSpec,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Explicit split shares; replaces the protocol split of `train_fraction`.
    #[serde(default)]
    pub split: Option<SplitFractions>,
}

impl TaskEntry {
    pub fn fractions(&self) -> SplitFractions {
        self.split.unwrap_or_else(|| SplitFractions::protocol(self.train_fraction))
    }
}

fn default_train_fraction() -> f64 {
    0.8
}

/// `count` base models sharing architecture, task and training fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationEntry {
    /// Variant label used to group models in analyses.
    pub variant: String,
    pub task: String,
    pub kind: CellKind,
    pub count: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    #[serde(default)]
    pub blocks: usize,
    /// Share of the base-training split actually used.
    #[serde(default = "one")]
    pub base_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSpec {
    pub input_dim: usize,
    pub theta_dim: usize,
    /// Twice the widest base model when absent.
    #[serde(default)]
    pub hidden_dim: Option<usize>,
}

/// Where an embedding comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ThetaSource {
    /// Embedding of one base model.
    Model(usize),
    /// Mean embedding of every model of a variant.
    Centroid(String),
    /// Explicit coordinates.
    Coords(Vec<f64>),
    /// Embedding of the base model with the highest test accuracy.
    BestBase,
    /// The zero embedding.
    Origin,
}

impl std::str::FromStr for ThetaSource {
    type Err = CliError;

    /// Parses `model:<id>`, `centroid:<variant>`, `coords:<x,y,..>`, `best`
    /// or `origin`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || CliError::Config(format!("bad theta source {s:?}"));
        match s {
            "best" => return Ok(Self::BestBase),
            "origin" => return Ok(Self::Origin),
            _ => {}
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "model" => rest.parse().map(Self::Model).map_err(|_| bad()),
            "centroid" => Ok(Self::Centroid(rest.to_string())),
            "coords" => rest
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Self::Coords)
                .map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisOptions {
    /// Landscape grid nodes per axis.
    pub grid: usize,
    /// Landscape extent relative to the embeddings' bounding box.
    pub extent_factor: f64,
    pub variance_threshold: f64,
    /// Dump base activations and run the SVCCA + MDS comparison.
    pub activations: bool,
    pub activation_examples: usize,
    pub svcca_dims: usize,
    pub ssl: SslOptions,
    pub fixed_points: FixedPointConfig,
    /// Model ids averaged by `average` when none are given on the command line.
    pub average: Vec<usize>,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            grid: 21,
            extent_factor: 1.5,
            variance_threshold: 0.95,
            activations: false,
            activation_examples: 32,
            svcca_dims: 20,
            ssl: SslOptions::default(),
            fixed_points: FixedPointConfig::default(),
            average: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslOptions {
    pub steps: usize,
    pub lr: f64,
    pub start: ThetaSource,
}

impl Default for SslOptions {
    fn default() -> Self {
        Self { steps: 100, lr: 0.5, start: ThetaSource::Origin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointConfig {
    pub theta: ThetaSource,
    /// Input held fixed while searching; zero when absent.
    pub x_star: Option<Vec<f64>>,
    pub tol: f64,
    pub radius: f64,
    pub max_steps: usize,
    pub step_size: f64,
    /// Test sequences whose visited states seed the search.
    pub candidate_sequences: usize,
    pub samples_per_seq: usize,
    /// Score-map nodes per axis; zero disables the map.
    pub score_grid: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        let d = FixedPointOptions::default();
        Self {
            theta: ThetaSource::BestBase,
            x_star: None,
            tol: d.tol,
            radius: d.radius,
            max_steps: d.max_steps,
            step_size: d.step_size,
            candidate_sequences: 32,
            samples_per_seq: 4,
            score_grid: 5,
        }
    }
}

impl FixedPointConfig {
    pub fn options(&self) -> FixedPointOptions {
        FixedPointOptions { tol: self.tol, radius: self.radius, max_steps: self.max_steps, step_size: self.step_size }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub metric: Option<HiddenMetric>,
    pub steps: Option<usize>,
}

/// One base model of the expanded population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub model_id: usize,
    pub variant: String,
    pub task: String,
    pub task_group: usize,
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub blocks: usize,
    pub base_fraction: f64,
    pub seed: u64,
}

/// Streams of derived seeds.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Split = 1,
    Base = 2,
    MetaInit = 3,
    MetaTrain = 4,
    Analysis = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(l) = o.lambda {
            self.meta_train.lambda = l;
        }
        if let Some(m) = o.metric {
            self.meta_train.hidden_metric = m;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CliError::Config(m));
        if self.tasks.is_empty() {
            return err("task list is empty".into());
        }
        if self.population.iter().map(|p| p.count).sum::<usize>() == 0 {
            return err("population is empty".into());
        }
        let mut names = BTreeSet::new();
        for t in &self.tasks {
            if !names.insert(t.name.as_str()) {
                return err(format!("duplicate task name {:?}", t.name));
            }
            if t.name.is_empty() || !t.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return err(format!("task name {:?} must be alphanumeric", t.name));
            }
            t.spec.validate().map_err(|e| CliError::Config(format!("task {}: {e}", t.name)))?;
            if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
                return err(format!("task {}: train_fraction must lie in (0, 1), got {}", t.name, t.train_fraction));
            }
            let fr = t.fractions();
            let shares = [fr.base_train, fr.meta_unlabeled, fr.ssl_labeled, fr.base_subfraction];
            if shares.iter().any(|f| !(0.0..=1.0).contains(f)) {
                return err(format!("task {}: split shares must lie in [0, 1]", t.name));
            }
            let sum = fr.base_train + fr.meta_unlabeled + fr.ssl_labeled;
            if sum >= 1.0 {
                return err(format!("task {}: split shares sum to {sum}, leaving no test data", t.name));
            }
        }
        let recurrent = self.population.first().map(|p| p.kind.is_recurrent());
        for p in &self.population {
            if !names.contains(p.task.as_str()) {
                return err(format!("population {:?} refers to unknown task {:?}", p.variant, p.task));
            }
            if !(p.base_fraction > 0.0 && p.base_fraction <= 1.0) {
                return err(format!("population {:?}: base_fraction must lie in (0, 1]", p.variant));
            }
            if p.input_dim == 0 || p.hidden_dim == 0 {
                return err(format!("population {:?}: dimensions must be positive", p.variant));
            }
            if !p.kind.is_recurrent() && p.blocks == 0 {
                return err(format!("population {:?}: residual models need blocks", p.variant));
            }
            if Some(p.kind.is_recurrent()) != recurrent {
                return err("population mixes recurrent and residual models".into());
            }
        }
        let vocab = self.tasks[0].spec.vocab_size;
        if self.tasks.iter().any(|t| t.spec.vocab_size != vocab) {
            return err("all tasks must share one vocabulary size".into());
        }
        if self.meta.input_dim == 0 || self.meta.theta_dim == 0 || self.meta.hidden_dim == Some(0) {
            return err("meta dimensions must be positive".into());
        }
        self.base_train.validate().map_err(|e| CliError::Config(format!("base_train: {e}")))?;
        self.meta_train.validate().map_err(|e| CliError::Config(format!("meta_train: {e}")))?;
        let a = &self.analysis;
        if a.grid == 0 || !(a.extent_factor > 0.0) || !(a.variance_threshold > 0.0 && a.variance_threshold <= 1.0) {
            return err("analysis: grid, extent_factor and variance_threshold must be positive".into());
        }
        if !(a.ssl.lr > 0.0) {
            return err("analysis.ssl.lr must be positive".into());
        }
        let fp = &a.fixed_points;
        if !(fp.tol > 0.0) || !(fp.radius >= 0.0) || !(fp.step_size > 0.0) || fp.samples_per_seq == 0 {
            return err("analysis.fixed_points: tol, step_size and samples_per_seq must be positive".into());
        }
        if fp.x_star.as_ref().is_some_and(|x| x.len() != self.meta.input_dim) {
            return err("analysis.fixed_points.x_star must have the meta input width".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (overrides included).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn derive_seed(&self, stream: SeedStream, index: u64) -> u64 {
        splitmix64(splitmix64(self.seed ^ ((stream as u64) << 56)) ^ index)
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| CliError::Config(format!("unknown task {name:?}")))
    }

    pub fn split_seed(&self, task: usize) -> u64 {
        self.derive_seed(SeedStream::Split, task as u64)
    }

    /// Population expanded to one plan per base model, ids in file order.
    pub fn plans(&self) -> Vec<ModelPlan> {
        let mut out = Vec::new();
        for p in &self.population {
            let group = self.task_index(&p.task).expect("validated task name");
            for _ in 0..p.count {
                let id = out.len();
                out.push(ModelPlan {
                    model_id: id,
                    variant: p.variant.clone(),
                    task: p.task.clone(),
                    task_group: group,
                    kind: p.kind,
                    input_dim: p.input_dim,
                    hidden_dim: p.hidden_dim,
                    output_dim: self.tasks[group].spec.num_classes,
                    blocks: if p.kind.is_recurrent() { 0 } else { p.blocks },
                    base_fraction: p.base_fraction,
                    seed: self.derive_seed(SeedStream::Base, id as u64),
                });
            }
        }
        out
    }
}
