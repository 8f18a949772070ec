//! Checkpoints: a JSON manifest beside a blob of little-endian `f32`s.
//!
//! The manifest indexes every tensor by name, shape and byte offset. Values
//! are quantized to `f32` before saving, so a model that was quantized in
//! memory round-trips exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dynamo_core::models::{BaseModel, CellKind, MetaModel, StateMap};
use dynamo_core::numgrad::{Bindings, Tensor};
use dynamo_core::trainer::MetaTrainState;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Meta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    /// `None` when the size overflows.
    pub fn byte_len(&self) -> Option<usize> {
        self.shape.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d))
    }
}

/// Bookkeeping for one base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub model_id: usize,
    pub variant: String,
    pub task: String,
    pub task_group: usize,
    pub base_fraction: f64,
    pub test_accuracy: f64,
    /// Learned embedding; empty in base checkpoints.
    #[serde(default)]
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub role: Role,
    pub model_kind: CellKind,
    pub vocab_size: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Zero for meta checkpoints, which list widths in `task_groups`.
    pub output_dim: usize,
    /// Zero for base checkpoints.
    pub theta_dim: usize,
    pub blocks: usize,
    /// Output width of each task group.
    pub task_groups: BTreeMap<usize, usize>,
    pub seed: u64,
    pub config_sha256: String,
    /// The base model itself, or every emulated model for a meta checkpoint.
    pub models: Vec<ModelRecord>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn format_err(path: &Path, detail: impl Into<String>) -> CliError {
    CliError::Format { path: path.to_path_buf(), detail: detail.into() }
}

impl Checkpoint {
    /// Writes `<stem>.json` and `<stem>.bin`, filling in the tensor index.
    pub fn save(&mut self, stem: &Path) -> Result<()> {
        let mut blob = Vec::new();
        self.manifest.tensors.clear();
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(CliError::Numeric(format!("tensor {name} is not finite")));
            }
            self.manifest.tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: blob.len() });
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let (json, bin) = paths(stem);
        if let Some(dir) = stem.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&json, text + "\n").map_err(|e| CliError::io(&json, e))?;
        std::fs::write(&bin, blob).map_err(|e| CliError::io(&bin, e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (json, bin) = paths(stem);
        let text = std::fs::read_to_string(&json).map_err(|e| CliError::io(&json, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&json, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(format_err(&json, format!("unsupported format version {}", manifest.format_version)));
        }
        let blob = std::fs::read(&bin).map_err(|e| CliError::io(&bin, e))?;
        check_index(&manifest.tensors, blob.len()).map_err(|d| format_err(&json, d))?;
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let len = e.byte_len().expect("checked index");
            let data = blob[e.offset..e.offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| format_err(&bin, err.to_string()))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(format_err(&json, format!("duplicate tensor {}", e.name)));
            }
        }
        Ok(Self { manifest, tensors })
    }

    fn take_prefixed(&self, prefix: &str) -> Bindings {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn from_base(model: &BaseModel, record: ModelRecord, seed: u64, config_sha256: &str) -> Self {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            role: Role::Base,
            model_kind: model.kind,
            vocab_size: model.vocab_size,
            input_dim: model.input_dim,
            hidden_dim: model.hidden_dim,
            output_dim: model.output_dim,
            theta_dim: 0,
            blocks: model.blocks,
            task_groups: BTreeMap::from([(model.task_group, model.output_dim)]),
            seed,
            config_sha256: config_sha256.to_string(),
            models: vec![record],
            tensors: Vec::new(),
        };
        Self { manifest, tensors: model.params.clone() }
    }

    pub fn to_base(&self) -> Result<BaseModel> {
        let m = &self.manifest;
        if m.role != Role::Base {
            return Err(CliError::Config("expected a base-model checkpoint".into()));
        }
        let task_group = *m.task_groups.keys().next().ok_or_else(|| CliError::Config("no task group".into()))?;
        let model = BaseModel {
            kind: m.model_kind,
            vocab_size: m.vocab_size,
            input_dim: m.input_dim,
            hidden_dim: m.hidden_dim,
            output_dim: m.output_dim,
            blocks: m.blocks,
            task_group,
            params: self.tensors.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    /// Meta checkpoint holding `meta.*`, `v{n}.*` and `theta{n}` tensors.
    /// `records[n].theta` is overwritten with the stored embedding.
    pub fn from_meta(state: &MetaTrainState, mut records: Vec<ModelRecord>, seed: u64, config_sha256: &str) -> Self {
        let mut tensors = BTreeMap::new();
        for (k, v) in &state.meta.params {
            tensors.insert(format!("meta.{k}"), v.clone());
        }
        for (n, map) in state.state_maps.iter().enumerate() {
            for (k, v) in &map.params {
                tensors.insert(format!("v{n}.{k}"), v.clone());
            }
        }
        for (n, th) in state.embeddings.iter().enumerate() {
            tensors.insert(format!("theta{n}"), Tensor::vector(th.clone()));
            if let Some(r) = records.get_mut(n) {
                r.theta = th.iter().map(|&v| v as f32 as f64).collect();
            }
        }
        let m = &state.meta;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            role: Role::Meta,
            model_kind: m.kind,
            vocab_size: m.vocab_size,
            input_dim: m.input_dim,
            hidden_dim: m.hidden_dim,
            output_dim: 0,
            theta_dim: m.theta_dim,
            blocks: m.blocks,
            task_groups: m.heads.clone(),
            seed,
            config_sha256: config_sha256.to_string(),
            models: records,
            tensors: Vec::new(),
        };
        Self { manifest, tensors }
    }

    /// Meta-model, state maps and embeddings; the loss history is not stored.
    pub fn to_meta(&self) -> Result<MetaTrainState> {
        let m = &self.manifest;
        if m.role != Role::Meta {
            return Err(CliError::Config("expected a meta-model checkpoint".into()));
        }
        let meta = MetaModel {
            kind: m.model_kind,
            vocab_size: m.vocab_size,
            input_dim: m.input_dim,
            theta_dim: m.theta_dim,
            hidden_dim: m.hidden_dim,
            blocks: m.blocks,
            heads: m.task_groups.clone(),
            params: self.take_prefixed("meta."),
        };
        meta.validate()?;
        let n = m.models.len();
        let mut state_maps = Vec::with_capacity(n);
        let mut embeddings = Vec::with_capacity(n);
        for i in 0..n {
            let params = self.take_prefixed(&format!("v{i}."));
            if params.is_empty() {
                return Err(CliError::Config(format!("state map {i} missing from checkpoint")));
            }
            state_maps.push(StateMap { params });
            let theta = self
                .tensors
                .get(&format!("theta{i}"))
                .ok_or_else(|| CliError::Config(format!("embedding {i} missing from checkpoint")))?;
            meta.check_theta(theta.data())?;
            embeddings.push(theta.data().to_vec());
        }
        Ok(MetaTrainState { meta, state_maps, embeddings, step: 0, history: Vec::new() })
    }
}

/// Offsets must be in bounds and the byte ranges pairwise disjoint.
pub fn check_index(entries: &[TensorEntry], blob_len: usize) -> std::result::Result<(), String> {
    let mut ranges: Vec<(usize, usize, &str)> = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e
            .offset
            .checked_add(e.byte_len().unwrap_or(usize::MAX))
            .ok_or_else(|| format!("tensor {} overflows", e.name))?;
        if end > blob_len {
            return Err(format!("tensor {} ends at byte {end} past blob length {blob_len}", e.name));
        }
        ranges.push((e.offset, end, &e.name));
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format!("tensors {} and {} overlap", w[0].2, w[1].2));
        }
    }
    Ok(())
}
