//! Operator CLI for the activation-tensor hallucination-detection toolkit.
//!
//! Exit codes: 0 success, 2 configuration error, 3 protocol violation
//! (evaluation-set leakage and similar), 4 numeric failure (divergence),
//! 1 anything else.

mod commands;
mod config;

use std::path::PathBuf;

use actvit::error::Error;
use clap::{Parser, Subcommand};

use commands::Ctx;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "actvit",
    version,
    about = "Hallucination detection on LLM activation tensors: synthetic data, training protocols, probes, and reports"
)]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for this run; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Force fully serial execution for bit-reproducibility.
    #[arg(long, global = true)]
    reference_mode: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy-LLM x planted-task dataset matrix.
    Synth,
    /// Run the configured training protocol and save the model.
    Train,
    /// Evaluate a saved model on one dataset's test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        llm: String,
        #[arg(long)]
        dataset: String,
    },
    /// Fine-tune only the target LLM's adapter on a data fraction.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        llm: String,
        #[arg(long)]
        dataset: String,
        /// Training fraction in percent (5, 10, 20, 50, 100).
        #[arg(long, default_value_t = 100)]
        fraction: u32,
    },
    /// Zero-shot evaluation with leakage guards.
    Zeroshot {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        llm: String,
        #[arg(long)]
        dataset: String,
    },
    /// Probe-AUC heatmap over (layer, token-offset) cells.
    Heatmap {
        #[arg(long)]
        llm: String,
        #[arg(long)]
        dataset: String,
    },
    /// Amortized per-instance inference latency.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Merge run metrics into comparison tables and figures.
    Report {
        /// Run directories or metrics.json files.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Protocol(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> actvit::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.reference_mode {
        config.reference_mode = true;
    }
    if config.reference_mode {
        actvit::force_serial();
    }
    let sub_dir = match &cli.command {
        Command::Synth => "synth",
        Command::Train => "train",
        Command::Eval { .. } => "eval",
        Command::Adapt { .. } => "adapt",
        Command::Zeroshot { .. } => "zeroshot",
        Command::Heatmap { .. } => "heatmap",
        Command::Bench { .. } => "bench",
        Command::Report { .. } => "report",
    };
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| config.out_dir.join(sub_dir));
    let ctx = Ctx::new(config, out)?;

    match cli.command {
        Command::Synth => commands::synth::run(&ctx),
        Command::Train => commands::train::run_train(&ctx),
        Command::Eval { model, llm, dataset } => {
            commands::train::run_eval(&ctx, &model, &llm, &dataset)
        }
        Command::Adapt {
            model,
            llm,
            dataset,
            fraction,
        } => commands::train::run_adapt(&ctx, &model, &llm, &dataset, fraction),
        Command::Zeroshot { model, llm, dataset } => {
            commands::train::run_zeroshot(&ctx, &model, &llm, &dataset)
        }
        Command::Heatmap { llm, dataset } => commands::heatmap::run(&ctx, &llm, &dataset),
        Command::Bench { model, batch, reps } => {
            commands::bench::run(&ctx, model.as_deref(), batch, reps)
        }
        Command::Report { inputs } => commands::report::run(&ctx, &inputs),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
