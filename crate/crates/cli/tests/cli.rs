use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynamo_cli::checkpoint::{check_index, Checkpoint, ModelRecord, TensorEntry};
use dynamo_cli::config::{ExperimentConfig, Overrides, ThetaSource};
use dynamo_cli::export::read_csv;
use dynamo_cli::pipeline::{Run, Stage};
use dynamo_core::atlas::evaluate_at;
use dynamo_core::tasks::Split;
use serde_json::{json, Value};

fn config() -> Value {
    json!({
        "seed": 3,
        "tasks": [{
            "name": "valence",
            "spec": {"kind": "valence_sentiment", "vocab_size": 24, "num_classes": 2, "num_examples": 400,
                     "min_len": 5, "max_len": 10, "noise_rate": 0.0, "seed": 4}
        }],
        "population": [
            {"variant": "full", "task": "valence", "kind": "gru", "count": 2, "input_dim": 6, "hidden_dim": 6},
            {"variant": "quarter", "task": "valence", "kind": "gru", "count": 1, "input_dim": 6, "hidden_dim": 6,
             "base_fraction": 0.25}
        ],
        "base_train": {"lr": 0.01, "epochs": 2},
        "meta_train": {"lr": 0.003, "max_steps": 40, "batch_size": 16},
        "meta": {"input_dim": 6, "theta_dim": 2, "hidden_dim": 12},
        "analysis": {
            "grid": 3,
            "activations": true,
            "svcca_dims": 4,
            "activation_examples": 8,
            "ssl": {"steps": 5},
            "fixed_points": {"max_steps": 300, "candidate_sequences": 6, "samples_per_seq": 2,
                             "score_grid": 2, "tol": 1e-3},
            "average": [0, 1]
        }
    })
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn dynamo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynamo")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stage(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    dynamo(&args)
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

const STAGES: [&str; 7] = ["gen-data", "train-base", "train-meta", "analyze", "ssl", "fixed-points", "average"];

fn full_run(cfg: &Path, out: &Path) {
    for s in STAGES {
        ok(stage(s, cfg, out, &[]));
    }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_for(cfg: &Path, out: &Path, stage: Stage) -> Run {
    Run::new(ExperimentConfig::load(cfg).unwrap(), out, &Overrides::default(), stage).unwrap()
}

#[test]
fn full_pipeline_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    full_run(&cfg, &a);
    full_run(&cfg, &b);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs between runs", k.display());
    }
    for k in fa.keys().filter(|k| k.extension().is_some_and(|e| e == "csv")) {
        let text = String::from_utf8(fa[k].clone()).unwrap();
        assert!(text.starts_with("# config_sha256="), "{}", k.display());
        assert!(text.lines().nth(1).is_some_and(|h| !h.is_empty()), "{} lacks a header", k.display());
    }
    for want in ["analysis/svcca.csv", "analysis/mds.csv", "fixed_points/score_map.csv", "average/report.csv"] {
        assert!(fa.contains_key(Path::new(want)), "{want} missing");
    }

    // one checkpoint per base model, with distinct seeds
    let seeds: Vec<u64> = (0..3)
        .map(|i| Checkpoint::load(&a.join(format!("bases/base_{i:03}"))).unwrap().manifest.seed)
        .collect();
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2] && seeds[0] != seeds[2]);
    assert!(!a.join("bases/base_003.json").exists());

    // embeddings recorded for every model
    let meta = Checkpoint::load(&a.join("meta/meta")).unwrap();
    assert_eq!(meta.manifest.models.len(), 3);
    for (n, r) in meta.manifest.models.iter().enumerate() {
        assert_eq!(r.theta.len(), 2);
        assert_eq!(r.theta, meta.tensors[&format!("theta{n}")].data());
    }

    // spectrum: one row per embedding dimension, descending
    let (_, rows) = read_csv(&a.join("analysis/spectrum.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    let v: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(v[0] >= v[1]);

    // fixed points satisfy the residual contract; score map has the grid size
    let (h, rows) = read_csv(&a.join("fixed_points/fixed_points.csv")).unwrap();
    assert_eq!(h[1], "residual");
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() <= 1e-3));
    assert_eq!(read_csv(&a.join("fixed_points/score_map.csv")).unwrap().1.len(), 4);
    let (_, land) = read_csv(&a.join("analysis/landscape_valence.csv")).unwrap();
    assert_eq!(land.len(), 9);
}

#[test]
fn checkpoint_round_trip_preserves_accuracy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config());
    let out = tmp.path().join("r");
    for s in ["gen-data", "train-base", "train-meta"] {
        ok(stage(s, &cfg, &out, &[]));
    }
    let run = run_for(&cfg, &out, Stage::Average);
    let ds = &run.load_datasets().unwrap()[0];
    let test = ds.indices(Split::Test);
    let lm = run.load_meta().unwrap();
    let (_, evals) = read_csv(&out.join("meta/evaluation.csv")).unwrap();
    for (n, row) in evals.iter().enumerate() {
        let acc = evaluate_at(&lm.state.meta, &lm.state.embeddings[n], 0, ds, &test, None).unwrap().accuracy;
        assert_eq!(acc, row[4].parse::<f64>().unwrap(), "model {n}");
    }
    let mut ck = Checkpoint::load(&run.meta_stem()).unwrap();
    let again = tmp.path().join("again/meta");
    ck.save(&again).unwrap();
    assert_eq!(Checkpoint::load(&again).unwrap(), ck);
    assert_eq!(std::fs::read(again.with_extension("bin")).unwrap(), std::fs::read(run.meta_stem().with_extension("bin")).unwrap());

    // single-id average reproduces that model's meta accuracy
    let r = run.average(Some(vec![2])).unwrap();
    assert_eq!(r.average_accuracy, r.meta_accuracies[0]);
    let r = run.average(Some(vec![0, 1])).unwrap();
    assert_eq!(r.theta, lm.state.embeddings[0].iter().zip(&lm.state.embeddings[1]).map(|(a, b)| (a + b) / 2.0).collect::<Vec<_>>());

    // explicit coordinates and centroids resolve
    let (t, g) = lm.resolve(&"coords:0.5,-0.5".parse::<ThetaSource>().unwrap()).unwrap();
    assert_eq!((t, g), (vec![0.5, -0.5], 0));
    let (t, _) = lm.resolve(&ThetaSource::Centroid("quarter".into())).unwrap();
    assert_eq!(t, lm.state.embeddings[2]);
    assert!(lm.resolve(&ThetaSource::Centroid("nope".into())).is_err());
}

#[test]
fn lambda_zero_logs_but_ignores_output_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config());
    let out = tmp.path().join("r");
    for s in ["gen-data", "train-base"] {
        ok(stage(s, &cfg, &out, &[]));
    }
    ok(stage("train-meta", &cfg, &out, &["--lambda", "0", "--steps", "12", "--metric", "l1"]));
    let (h, rows) = read_csv(&out.join("meta/loss.csv")).unwrap();
    assert_eq!(h, ["step", "model_id", "hidden_loss", "output_loss", "total_loss"]);
    assert_eq!(rows.len(), 12);
    for r in rows {
        let f: Vec<f64> = r[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert!(f[1] > 0.0);
        assert_eq!(f[2], f[0]);
    }
}

#[test]
fn config_errors_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let mut bad_split = config();
    bad_split["tasks"][0]["split"] = json!({"base_train": 0.6, "meta_unlabeled": 0.5, "ssl_labeled": 0.01});
    let mut empty = config();
    empty["tasks"] = json!([]);
    let mut unknown = config();
    unknown["meta"]["widths"] = json!(3);
    let mut no_pop = config();
    no_pop["population"][0]["task"] = json!("topics");
    for (name, v) in [("split", bad_split), ("empty", empty), ("unknown", unknown), ("task", no_pop)] {
        let p = tmp.path().join(format!("{name}.json"));
        std::fs::write(&p, v.to_string()).unwrap();
        let o = stage("gen-data", &p, &out, &[]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = stage("gen-data", &tmp.path().join("missing.json"), &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = dynamo(&["gen-data"]);
    assert_eq!(o.status.code(), Some(2));
    let p = tmp.path().join("bad_split_msg.json");
    let mut v = config();
    v["tasks"][0]["split"] = json!({"base_train": 0.6, "meta_unlabeled": 0.5, "ssl_labeled": 0.01});
    std::fs::write(&p, v.to_string()).unwrap();
    assert!(String::from_utf8_lossy(&stage("gen-data", &p, &out, &[]).stderr).contains("sum"));
}

#[test]
fn missing_inputs_exit_with_status_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config());
    let out = tmp.path().join("r");
    assert_eq!(stage("train-base", &cfg, &out, &[]).status.code(), Some(3));
    ok(stage("gen-data", &cfg, &out, &[]));
    assert_eq!(stage("train-meta", &cfg, &out, &[]).status.code(), Some(3));
}

#[test]
fn diverging_training_exits_with_status_four() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = config();
    v["base_train"] = json!({"lr": 1e300, "epochs": 2, "cosine": false});
    let cfg = write_config(tmp.path(), &v);
    let out = tmp.path().join("r");
    ok(stage("gen-data", &cfg, &out, &[]));
    let o = stage("train-base", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config());
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    ok(stage("gen-data", &cfg, &a, &[]));
    ok(stage("gen-data", &cfg, &b, &[]));
    ok(stage("gen-data", &cfg, &c, &["--seed", "99"]));
    assert_eq!(files(&a), files(&b));
    let tsv = |d: &Path| std::fs::read(d.join("data/valence.tsv")).unwrap();
    let manifest = |d: &Path| std::fs::read(d.join("data/valence.json")).unwrap();
    assert_eq!(tsv(&a), tsv(&c), "sequences depend only on the task seed");
    assert_ne!(manifest(&a), manifest(&c), "the split depends on the root seed");
}

#[test]
fn theta_source_parsing() {
    assert_eq!("model:3".parse::<ThetaSource>().unwrap(), ThetaSource::Model(3));
    assert_eq!("centroid:full".parse::<ThetaSource>().unwrap(), ThetaSource::Centroid("full".into()));
    assert_eq!("coords:1,-2.5".parse::<ThetaSource>().unwrap(), ThetaSource::Coords(vec![1.0, -2.5]));
    assert_eq!("best".parse::<ThetaSource>().unwrap(), ThetaSource::BestBase);
    assert_eq!("origin".parse::<ThetaSource>().unwrap(), ThetaSource::Origin);
    for bad in ["model:x", "coords:1,a", "grid:1", "3"] {
        assert!(bad.parse::<ThetaSource>().is_err(), "{bad}");
    }
}

#[test]
fn manifest_index_rejects_overlap_and_overflow() {
    let e = |name: &str, shape: Vec<usize>, offset| TensorEntry { name: name.into(), shape, offset };
    assert!(check_index(&[e("a", vec![2, 2], 0), e("b", vec![3], 16)], 28).is_ok());
    assert!(check_index(&[e("a", vec![2, 2], 0), e("b", vec![3], 12)], 28).unwrap_err().contains("overlap"));
    assert!(check_index(&[e("a", vec![2, 2], 0), e("b", vec![3], 16)], 27).is_err());
    assert!(check_index(&[e("a", vec![usize::MAX, 2], 8)], 28).is_err());
}

#[test]
fn base_checkpoint_round_trip_within_f32() {
    use dynamo_core::models::{BaseModel, CellKind};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let model = BaseModel::new(CellKind::VanillaRnn, 10, 3, 5, 2, 0, 0, &mut rng).unwrap();
    let record = ModelRecord {
        model_id: 0,
        variant: "v".into(),
        task: "t".into(),
        task_group: 0,
        base_fraction: 1.0,
        test_accuracy: 0.5,
        theta: vec![],
    };
    let tmp = tempfile::tempdir().unwrap();
    let stem = tmp.path().join("m");
    Checkpoint::from_base(&model, record, 1, "abc").save(&stem).unwrap();
    let back = Checkpoint::load(&stem).unwrap().to_base().unwrap();
    for (k, t) in &model.params {
        for (a, b) in t.data().iter().zip(back.params[k].data()) {
            assert!((a - b).abs() <= a.abs() * 1e-7, "{k}");
        }
    }
    let blob = std::fs::metadata(stem.with_extension("bin")).unwrap().len() as usize;
    assert_eq!(blob, model.params.values().map(|t| t.len() * 4).sum::<usize>());
    std::fs::write(stem.with_extension("bin"), vec![0u8; blob - 4]).unwrap();
    assert!(Checkpoint::load(&stem).is_err());
}
