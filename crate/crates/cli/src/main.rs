use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use stlcluster::experiment::{ExperimentConfig, Pipeline, Stage};

#[derive(Parser)]
#[command(name = "stlcluster", version, about = "Clustering-based STL controller synthesis benchmark")]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small smoke-test configuration instead of the
    /// benchmark defaults (ignored with --config).
    #[arg(long, global = true)]
    smoke: bool,
    /// Overrides the master seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample instances and solve them by trajectory optimization.
    GenData,
    /// Cluster the optimal trajectories.
    Cluster,
    /// Train the cluster classifier.
    TrainClassifier,
    /// Sample training instances and split them by predicted cluster.
    Partition,
    /// Train one recurrent policy per cluster.
    TrainPolicies,
    /// Train the single-policy baseline.
    TrainSingle,
    /// Roll out both controllers on the test set and compute metrics.
    Evaluate,
    /// Print the metrics table of a finished run.
    Report,
    /// Run every stage, skipping those whose inputs are unchanged.
    RunAll,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    // reporting on a finished run keeps the configuration it was run with
    let saved = cli.out.join("config.toml");
    let report_only = matches!(cli.command, Command::Report) && cli.config.is_none() && saved.exists();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None if report_only => ExperimentConfig::load(&saved)?,
        None if cli.smoke => ExperimentConfig::smoke(),
        None => ExperimentConfig::default(),
    };
    if let (Some(seed), false) = (cli.seed, report_only) {
        cfg.seed = seed;
    }
    let pipeline = Pipeline::new(cfg, &cli.out)?;
    let stage = match cli.command {
        Command::GenData => Stage::GenData,
        Command::Cluster => Stage::Cluster,
        Command::TrainClassifier => Stage::TrainClassifier,
        Command::Partition => Stage::Partition,
        Command::TrainPolicies => Stage::TrainPolicies,
        Command::TrainSingle => Stage::TrainSingle,
        Command::Evaluate => Stage::Evaluate,
        Command::Report => {
            print!("{}", pipeline.report()?);
            return Ok(());
        }
        Command::RunAll => {
            pipeline.run_all()?;
            print!("{}", pipeline.report()?);
            return Ok(());
        }
    };
    pipeline.run(stage)?;
    Ok(())
}
