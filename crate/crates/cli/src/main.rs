use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dynamo_cli::config::{ExperimentConfig, Overrides, ThetaSource};
use dynamo_cli::pipeline::{Run, Stage};
use dynamo_cli::CliError;
use dynamo_core::trainer::HiddenMetric;

#[derive(Parser)]
#[command(name = "dynamo", version, about = "Train a meta-model over a population of networks and analyze its embedding space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory shared by all stages.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output-loss weight for meta training.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Hidden-state metric for meta training.
    #[arg(long, global = true)]
    metric: Option<Metric>,
    /// Meta-training steps, embedding-search steps or fixed-point descent
    /// steps, depending on the command.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    L1,
    L2,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split every task's dataset.
    GenData,
    /// Train the base-model population.
    TrainBase,
    /// Train the meta-model, state maps and embeddings.
    TrainMeta,
    /// Embedding atlas, spectrum, clustering and accuracy landscapes.
    Analyze,
    /// Optimize an embedding on the small labeled split.
    Ssl,
    /// Fixed points and word-score map of the meta-model at one embedding.
    FixedPoints {
        /// `model:<id>`, `centroid:<variant>`, `coords:<x,y,..>`, `best` or `origin`.
        #[arg(long)]
        theta: Option<String>,
    },
    /// Evaluate the meta-model at the mean embedding of some models.
    Average {
        /// Comma-separated model ids.
        #[arg(long, value_delimiter = ',')]
        models: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(&path)?;
    let overrides = Overrides {
        seed: cli.seed,
        lambda: cli.lambda,
        metric: cli.metric.map(|m| match m {
            Metric::L1 => HiddenMetric::L1,
            Metric::L2 => HiddenMetric::L2Squared,
        }),
        steps: cli.steps,
    };
    let stage = match &cli.command {
        Command::GenData => Stage::GenData,
        Command::TrainBase => Stage::TrainBase,
        Command::TrainMeta => Stage::TrainMeta,
        Command::Analyze => Stage::Analyze,
        Command::Ssl => Stage::Ssl,
        Command::FixedPoints { .. } => Stage::FixedPoints,
        Command::Average { .. } => Stage::Average,
    };
    let run = Run::new(cfg, cli.out, &overrides, stage)?;
    match cli.command {
        Command::GenData => run.gen_data(),
        Command::TrainBase => run.train_base(),
        Command::TrainMeta => run.train_meta(),
        Command::Analyze => {
            let s = run.analyze()?;
            println!("components for {:.0}% variance: {}", 100.0 * s.variance_threshold, s.components_for_variance);
            if let Some(v) = s.silhouette_by_variant {
                println!("silhouette by variant: {v:.4}");
            }
            if let Some(v) = s.silhouette_by_task {
                println!("silhouette by task: {v:.4}");
            }
            for l in &s.landscapes {
                println!(
                    "landscape {}: best {:.4} (best base {:.4}), outside hull: {}",
                    l.task, l.best_accuracy, l.max_base_accuracy, l.best_outside_hull
                );
            }
            Ok(())
        }
        Command::Ssl => {
            let s = run.ssl()?;
            println!(
                "accuracy {:.4} -> {:.4}; best base {:.4}; delta {:+.4}",
                s.start_accuracy, s.final_accuracy, s.best_base_accuracy, s.delta_vs_best_base
            );
            Ok(())
        }
        Command::FixedPoints { theta } => {
            let src = theta.map(|t| t.parse::<ThetaSource>()).transpose()?;
            let s = run.fixed_points(src)?;
            println!("{} fixed points, max residual {:.3e}", s.count, s.max_residual);
            if let (Some(e), Some(t), Some(r)) = (s.extent, s.thickness, s.spearman) {
                println!("extent {e:.4}, thickness {t:.4}, readout rank correlation {r:.4}");
            }
            Ok(())
        }
        Command::Average { models } => {
            let ids = if models.is_empty() { None } else { Some(models) };
            let r = run.average(ids)?;
            for ((id, b), m) in r.model_ids.iter().zip(&r.base_accuracies).zip(&r.meta_accuracies) {
                println!("model {id}: base {b:.4}, meta {m:.4}");
            }
            println!("average embedding: {:.4}", r.average_accuracy);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
