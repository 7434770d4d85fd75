use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sru::harness::{report::write_atomic, run_all, Ablation, ExperimentConfig, Pipeline};
use sru::unlearning::format_requests;

/// Staged training, evaluation and unlearning of sharded session recommenders.
#[derive(Parser)]
#[command(name = "sru", version)]
struct Cli {
    /// Experiment config (flat `key = value` lines). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding checkpoints and reports.
    #[arg(long, default_value = "work")]
    work: PathBuf,
    /// Accept artifacts produced under a different config.
    #[arg(long)]
    force: bool,
    /// Override a config key, e.g. `--set partition.k=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved config.
    Config,
    /// Build the corpus and its train/validation/test splits.
    Preprocess,
    /// Train the reference model used for partitioning and CED.
    Pretrain,
    /// Assign training sessions to shards.
    Partition,
    /// Train one sub-model per shard.
    TrainShards {
        #[arg(long)]
        parallel: bool,
    },
    /// Train the attention aggregation over frozen sub-models.
    TrainAgg,
    /// Recall and NDCG on validation and test.
    Eval,
    /// Write a request file sampled from the training shards.
    SampleRequests {
        #[arg(long)]
        out: PathBuf,
    },
    /// Execute deletion requests and retrain what they touch.
    Unlearn {
        #[arg(long)]
        requests: PathBuf,
    },
    /// HIT@K of unlearned targets after the last unlearn run.
    Effectiveness,
    /// Unlearning time against full retraining on one shard's requests.
    Bench {
        #[arg(long, default_value_t = 3)]
        runs: usize,
    },
    /// Sweep the shard count, partition method or deletion size.
    Ablate {
        #[arg(value_parser = ["shards", "partition", "deletion"])]
        which: String,
    },
    /// Preprocess through eval in one go.
    All {
        #[arg(long)]
        parallel: bool,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let cfg = cfg.with_env_seed()?;
    cfg.validate()?;

    let mut pipeline = Pipeline::new(cfg, &cli.work);
    pipeline.force = cli.force;

    match cli.command {
        Command::Config => print!("{}", pipeline.cfg.render()),
        Command::Preprocess => pipeline.preprocess()?,
        Command::Pretrain => pipeline.pretrain()?,
        Command::Partition => pipeline.partition()?,
        Command::TrainShards { parallel } => pipeline.train_shards(parallel)?,
        Command::TrainAgg => pipeline.train_agg()?,
        Command::Eval => pipeline.eval()?,
        Command::SampleRequests { out } => {
            let requests = pipeline.sample_requests()?;
            write_atomic(&out, format_requests(&requests).as_bytes())?;
            log::info!("wrote {} requests to {}", requests.len(), out.display());
        }
        Command::Unlearn { requests } => pipeline.unlearn(&requests)?,
        Command::Effectiveness => pipeline.effectiveness()?,
        Command::Bench { runs } => pipeline.bench(runs)?,
        Command::Ablate { which } => pipeline.ablate(Ablation::parse(&which).expect("checked by clap"))?,
        Command::All { parallel } => run_all(&pipeline, parallel)?,
    }
    Ok(())
}
