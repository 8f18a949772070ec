//! Synthetic sequence-classification tasks and dataset splitting.
//!
//! Two generators are provided. The valence task gives every token a fixed
//! valence in {+1, -1, 0} and labels a sequence positive iff its valence
//! sum is positive, so a running-sum integrator solves it. The topic task
//! splits the vocabulary into topic blocks plus noise tokens and labels a
//! sequence with its most frequent topic.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::log_sum_exp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ValenceSentiment,
    TopicClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Valence {
    Positive,
    Negative,
    Neutral,
}

impl Valence {
    pub fn sign(self) -> i64 {
        match self {
            Valence::Positive => 1,
            Valence::Negative => -1,
            Valence::Neutral => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    BaseTrain,
    MetaUnlabeled,
    SslLabeled,
    Test,
    /// Part of the base share left out by a base sub-fraction.
    Unused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub num_examples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.min_len < 1 || self.max_len < self.min_len {
            return bad("length range must satisfy 1 <= min_len <= max_len");
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad("noise rate must lie in [0, 0.5)");
        }
        if self.num_examples == 0 {
            return bad("num_examples must be positive");
        }
        match self.kind {
            TaskKind::ValenceSentiment => {
                if self.num_classes != 2 {
                    return bad("valence task has exactly 2 classes");
                }
                if self.vocab_size < 3 {
                    return bad("valence task needs at least 3 tokens");
                }
            }
            TaskKind::TopicClassification => {
                if self.num_classes < 3 {
                    return bad("topic task needs at least 3 classes");
                }
                if self.vocab_size - self.vocab_size / 4 < self.num_classes {
                    return bad("vocabulary too small for one token per topic");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub sequences: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Per-token valence (valence task only).
    pub valence: Option<Vec<Valence>>,
    /// Per-token topic, `None` for noise tokens (topic task only).
    pub topics: Option<Vec<Option<usize>>>,
    pub seed: u64,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Indices of a split, or an error naming it if it is empty.
    pub fn require(&self, split: Split) -> Result<Vec<usize>> {
        let idx = self.indices(split);
        if idx.is_empty() {
            return Err(Error::EmptySplit(split_name(split)));
        }
        Ok(idx)
    }

    /// Sum of token valences (valence task).
    pub fn valence_sum(&self, tokens: &[usize]) -> Option<i64> {
        let v = self.valence.as_ref()?;
        Some(tokens.iter().map(|&t| v[t].sign()).sum())
    }

    /// Tokens with the given valence, ascending.
    pub fn tokens_with(&self, valence: Valence) -> Vec<usize> {
        match &self.valence {
            Some(v) => (0..v.len()).filter(|&t| v[t] == valence).collect(),
            None => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.len() != self.labels.len() || self.splits.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} sequences, {} labels, {} split tags",
                self.sequences.len(),
                self.labels.len(),
                self.splits.len()
            )));
        }
        for (s, &l) in self.sequences.iter().zip(&self.labels) {
            if s.is_empty() {
                return Err(Error::EmptySequence);
            }
            if let Some(&token) = s.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::TokenOutOfRange { token, vocab: self.vocab_size });
            }
            if l >= self.num_classes {
                return Err(Error::LabelOutOfRange { label: l, classes: self.num_classes });
            }
        }
        Ok(())
    }
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::BaseTrain => "base_train",
        Split::MetaUnlabeled => "meta_unlabeled",
        Split::SslLabeled => "ssl_labeled",
        Split::Test => "test",
        Split::Unused => "unused",
    }
}

/// Token valences: first third positive, second third negative, rest neutral.
pub fn valence_map(vocab_size: usize) -> Vec<Valence> {
    let third = vocab_size / 3;
    (0..vocab_size)
        .map(|t| {
            if t < third {
                Valence::Positive
            } else if t < 2 * third {
                Valence::Negative
            } else {
                Valence::Neutral
            }
        })
        .collect()
}

/// Token topics: `num_classes` equal blocks, then about a quarter of the
/// vocabulary as noise tokens.
pub fn topic_map(vocab_size: usize, num_classes: usize) -> Vec<Option<usize>> {
    let per = (vocab_size - vocab_size / 4) / num_classes;
    (0..vocab_size)
        .map(|t| if t < per * num_classes { Some(t / per) } else { None })
        .collect()
}

fn flip_labels(labels: &mut [usize], noise: f64, classes: usize, rng: &mut ChaCha8Rng) {
    let n = labels.len();
    let flips = (noise * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &i in &order[..flips] {
        let shift = rng.random_range(1..classes);
        labels[i] = (labels[i] + shift) % classes;
    }
}

pub fn gen_valence_task(spec: &TaskSpec) -> Result<SequenceDataset> {
    spec.validate()?;
    if spec.kind != TaskKind::ValenceSentiment {
        return Err(Error::InvalidSpec("expected a valence_sentiment spec".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let valence = valence_map(spec.vocab_size);
    let mut sequences = Vec::with_capacity(spec.num_examples);
    let mut labels = Vec::with_capacity(spec.num_examples);
    while sequences.len() < spec.num_examples {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        let sum: i64 = seq.iter().map(|&t| valence[t].sign()).sum();
        if sum == 0 {
            continue;
        }
        labels.push(usize::from(sum > 0));
        sequences.push(seq);
    }
    flip_labels(&mut labels, spec.noise_rate, 2, &mut rng);
    Ok(SequenceDataset {
        vocab_size: spec.vocab_size,
        num_classes: 2,
        splits: vec![Split::Test; sequences.len()],
        sequences,
        labels,
        valence: Some(valence),
        topics: None,
        seed: spec.seed,
    })
}

/// Label of a topic sequence, `None` on a tie or when no topic token occurs.
pub fn topic_label(topics: &[Option<usize>], classes: usize, seq: &[usize]) -> Option<usize> {
    let mut counts = vec![0usize; classes];
    for &t in seq {
        if let Some(c) = topics[t] {
            counts[c] += 1;
        }
    }
    let best = *counts.iter().max()?;
    if best == 0 || counts.iter().filter(|&&c| c == best).count() > 1 {
        return None;
    }
    counts.iter().position(|&c| c == best)
}

pub fn gen_topic_task(spec: &TaskSpec) -> Result<SequenceDataset> {
    spec.validate()?;
    if spec.kind != TaskKind::TopicClassification {
        return Err(Error::InvalidSpec("expected a topic_classification spec".into()));
    }
    let c = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let topics = topic_map(spec.vocab_size, c);
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); c];
    let mut noise = Vec::new();
    for (t, topic) in topics.iter().enumerate() {
        match topic {
            Some(k) => blocks[*k].push(t),
            None => noise.push(t),
        }
    }
    let mut sequences = Vec::with_capacity(spec.num_examples);
    let mut labels = Vec::with_capacity(spec.num_examples);
    while sequences.len() < spec.num_examples {
        let class = rng.random_range(0..c);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let seq: Vec<usize> = (0..len)
            .map(|_| {
                if !noise.is_empty() && rng.random_bool(0.5) {
                    noise[rng.random_range(0..noise.len())]
                } else {
                    let k = if rng.random_bool(0.5) { class } else { rng.random_range(0..c) };
                    blocks[k][rng.random_range(0..blocks[k].len())]
                }
            })
            .collect();
        if let Some(label) = topic_label(&topics, c, &seq) {
            labels.push(label);
            sequences.push(seq);
        }
    }
    flip_labels(&mut labels, spec.noise_rate, c, &mut rng);
    Ok(SequenceDataset {
        vocab_size: spec.vocab_size,
        num_classes: c,
        splits: vec![Split::Test; sequences.len()],
        sequences,
        labels,
        valence: None,
        topics: Some(topics),
        seed: spec.seed,
    })
}

pub fn generate(spec: &TaskSpec) -> Result<SequenceDataset> {
    match spec.kind {
        TaskKind::ValenceSentiment => gen_valence_task(spec),
        TaskKind::TopicClassification => gen_topic_task(spec),
    }
}

/// Split proportions as fractions of the whole dataset; the remainder is test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub base_train: f64,
    pub meta_unlabeled: f64,
    pub ssl_labeled: f64,
    /// Share of the base portion actually tagged `base_train`.
    #[serde(default = "one")]
    pub base_subfraction: f64,
}

fn one() -> f64 {
    1.0
}

impl SplitFractions {
    /// Training share `train` of the data: half goes to meta-model
    /// training, 1% of it is held out as labeled search data, and the rest
    /// trains the base models.
    pub fn protocol(train: f64) -> Self {
        Self {
            base_train: train * 0.49,
            meta_unlabeled: train * 0.5,
            ssl_labeled: train * 0.01,
            base_subfraction: 1.0,
        }
    }

    pub fn with_subfraction(mut self, f: f64) -> Self {
        self.base_subfraction = f;
        self
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self::protocol(0.8)
    }
}

/// Shuffled partition with sizes `floor(fraction * N)`. Base sub-fractions
/// of the same seed are nested prefixes of the base share.
pub fn split_dataset(ds: &SequenceDataset, fr: SplitFractions, seed: u64) -> Result<SequenceDataset> {
    let parts = [fr.base_train, fr.meta_unlabeled, fr.ssl_labeled];
    if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || !(0.0..=1.0).contains(&fr.base_subfraction) {
        return Err(Error::FractionOverflow(format!("fractions must lie in [0, 1]: {fr:?}")));
    }
    let total: f64 = parts.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::FractionOverflow(format!("fractions sum to {total} > 1")));
    }
    let n = ds.len();
    let size = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let (nb, nm, ns) = (size(fr.base_train), size(fr.meta_unlabeled), size(fr.ssl_labeled));
    let nb_used = ((fr.base_subfraction * nb as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = ds.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.splits[i] = if rank < nb_used {
            Split::BaseTrain
        } else if rank < nb {
            Split::Unused
        } else if rank < nb + nm {
            Split::MetaUnlabeled
        } else if rank < nb + nm + ns {
            Split::SslLabeled
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Softmax cross-entropy of final-step logits against `label`.
pub fn task_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    vocab_size: usize,
    num_classes: usize,
    seed: u64,
    valence: Option<Vec<Valence>>,
    topics: Option<Vec<Option<usize>>>,
    base_train: Vec<usize>,
    meta_unlabeled: Vec<usize>,
    ssl_labeled: Vec<usize>,
    test: Vec<usize>,
    unused: Vec<usize>,
}

/// Writes `label<TAB>tok,tok,...` lines to `data` and the JSON manifest to
/// `manifest`.
pub fn save_dataset(ds: &SequenceDataset, data: &Path, manifest: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(data)?);
    for (s, l) in ds.sequences.iter().zip(&ds.labels) {
        let toks: Vec<String> = s.iter().map(usize::to_string).collect();
        writeln!(w, "{l}\t{}", toks.join(","))?;
    }
    w.flush()?;
    let m = Manifest {
        vocab_size: ds.vocab_size,
        num_classes: ds.num_classes,
        seed: ds.seed,
        valence: ds.valence.clone(),
        topics: ds.topics.clone(),
        base_train: ds.indices(Split::BaseTrain),
        meta_unlabeled: ds.indices(Split::MetaUnlabeled),
        ssl_labeled: ds.indices(Split::SslLabeled),
        test: ds.indices(Split::Test),
        unused: ds.indices(Split::Unused),
    };
    fs::write(manifest, serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn load_dataset(data: &Path, manifest: &Path) -> Result<SequenceDataset> {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let mut sequences = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(fs::File::open(data)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |what: &str| Error::Config(format!("{}:{}: {what}", data.display(), lineno + 1));
        let (label, toks) = line.split_once('\t').ok_or_else(|| parse_err("missing tab"))?;
        labels.push(label.trim().parse().map_err(|_| parse_err("bad label"))?);
        let seq = toks
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| parse_err("bad token id"))?;
        sequences.push(seq);
    }
    let n = labels.len();
    let mut splits = vec![None; n];
    for (tag, idx) in [
        (Split::BaseTrain, &m.base_train),
        (Split::MetaUnlabeled, &m.meta_unlabeled),
        (Split::SslLabeled, &m.ssl_labeled),
        (Split::Test, &m.test),
        (Split::Unused, &m.unused),
    ] {
        for &i in idx {
            if i >= n || splits[i].is_some() {
                return Err(Error::Config(format!("split index {i} invalid or repeated")));
            }
            splits[i] = Some(tag);
        }
    }
    let splits = splits
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Config("split lists do not cover every example".into()))?;
    let ds = SequenceDataset {
        vocab_size: m.vocab_size,
        num_classes: m.num_classes,
        sequences,
        labels,
        splits,
        valence: m.valence,
        topics: m.topics,
        seed: m.seed,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valence_spec(seed: u64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::ValenceSentiment,
            vocab_size: 30,
            num_classes: 2,
            num_examples: 2000,
            min_len: 8,
            max_len: 32,
            noise_rate: 0.05,
            seed,
        }
    }

    fn topic_spec(seed: u64) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::TopicClassification,
            vocab_size: 40,
            num_classes: 4,
            num_examples: 10_000,
            min_len: 8,
            max_len: 32,
            noise_rate: 0.0,
            seed,
        }
    }

    #[test]
    fn valence_labels_follow_sum_sign() {
        let mut spec = valence_spec(3);
        spec.noise_rate = 0.0;
        let ds = gen_valence_task(&spec).unwrap();
        ds.validate().unwrap();
        for (s, &l) in ds.sequences.iter().zip(&ds.labels) {
            let sum = ds.valence_sum(s).unwrap();
            assert_ne!(sum, 0);
            assert_eq!(l, usize::from(sum > 0));
        }
        let pos = ds.tokens_with(Valence::Positive);
        assert_eq!(ds.valence_sum(&pos[..3]), Some(3));
    }

    #[test]
    fn valence_generation_is_deterministic() {
        let a = gen_valence_task(&valence_spec(7)).unwrap();
        let b = gen_valence_task(&valence_spec(7)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a, gen_valence_task(&valence_spec(8)).unwrap());
    }

    #[test]
    fn integrator_accuracy_matches_noise_rate() {
        let spec = valence_spec(11);
        let ds = gen_valence_task(&spec).unwrap();
        let ds = split_dataset(&ds, SplitFractions::default(), 1).unwrap();
        let test = ds.indices(Split::Test);
        let correct = test
            .iter()
            .filter(|&&i| usize::from(ds.valence_sum(&ds.sequences[i]).unwrap() > 0) == ds.labels[i])
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 1.0 - spec.noise_rate - 0.02, "accuracy {acc}");
    }

    #[test]
    fn topic_labels_are_argmax_and_balanced() {
        let ds = gen_topic_task(&topic_spec(5)).unwrap();
        let topics = ds.topics.clone().unwrap();
        let mut freq = [0usize; 4];
        for (s, &l) in ds.sequences.iter().zip(&ds.labels) {
            assert_eq!(topic_label(&topics, 4, s), Some(l));
            freq[l] += 1;
        }
        for f in freq {
            let p = f as f64 / ds.len() as f64;
            assert!((p - 0.25).abs() <= 0.03, "class frequency {p}");
        }
    }

    #[test]
    fn topic_edge_cases() {
        let topics = topic_map(40, 4);
        let block2: Vec<usize> = (0..40).filter(|&t| topics[t] == Some(2)).collect();
        assert_eq!(topic_label(&topics, 4, &block2), Some(2));
        let b0 = (0..40).find(|&t| topics[t] == Some(0)).unwrap();
        let b1 = (0..40).find(|&t| topics[t] == Some(1)).unwrap();
        assert_eq!(topic_label(&topics, 4, &[b0, b1]), None);
    }

    #[test]
    fn spec_validation() {
        let mut s = valence_spec(0);
        s.min_len = 0;
        assert!(gen_valence_task(&s).is_err());
        let mut s = topic_spec(0);
        s.num_classes = 2;
        assert!(gen_topic_task(&s).is_err());
        assert!(gen_topic_task(&valence_spec(0)).is_err());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let mut spec = valence_spec(2);
        spec.num_examples = 100;
        let ds = gen_valence_task(&spec).unwrap();
        let fr = SplitFractions { base_train: 0.5, meta_unlabeled: 0.5, ssl_labeled: 0.0, base_subfraction: 1.0 };
        let s = split_dataset(&ds, fr, 9).unwrap();
        assert_eq!(s.indices(Split::BaseTrain).len(), 50);
        assert_eq!(s.indices(Split::MetaUnlabeled).len(), 50);
        assert_eq!(s.indices(Split::SslLabeled).len(), 0);
        let q = split_dataset(&ds, fr.with_subfraction(0.25), 9).unwrap();
        assert_eq!(q.indices(Split::BaseTrain).len(), 12);
        assert!(q.indices(Split::BaseTrain).iter().all(|&i| s.splits[i] == Split::BaseTrain));
        assert_eq!(q.indices(Split::MetaUnlabeled), s.indices(Split::MetaUnlabeled));
        assert_eq!(split_dataset(&ds, fr, 9).unwrap(), s);
        let over = SplitFractions { base_train: 0.6, meta_unlabeled: 0.5, ssl_labeled: 0.0, base_subfraction: 1.0 };
        assert!(matches!(split_dataset(&ds, over, 9), Err(Error::FractionOverflow(_))));
    }

    #[test]
    fn task_loss_values() {
        assert!((task_loss(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(task_loss(&[100.0, 0.0], 0).unwrap() < 1e-40);
        assert!((task_loss(&[1.0, 0.0], 0).unwrap() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((task_loss(&[1.0, 0.0], 0).unwrap() - 0.3133).abs() < 1e-4);
        assert!(matches!(task_loss(&[0.0, 0.0], 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let ds = gen_topic_task(&TaskSpec { num_examples: 50, ..topic_spec(1) }).unwrap();
        let ds = split_dataset(&ds, SplitFractions::default().with_subfraction(0.5), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (d, m) = (dir.path().join("d.tsv"), dir.path().join("d.json"));
        save_dataset(&ds, &d, &m).unwrap();
        assert_eq!(load_dataset(&d, &m).unwrap(), ds);
    }
}
