use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Debug, Parser)]
#[command(name = "gridbench", version, about = "Graph surrogate benchmark for AC optimal power flow")]
struct Cli {
    /// TOML config (or a `run.json` from an earlier run).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for compatibility; training runs on one thread.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check case files for structural problems.
    Validate {
        #[arg(long = "case", required = true)]
        cases: Vec<PathBuf>,
    },
    /// Write a dataset manifest with a seeded train/val/test split.
    Split {
        #[arg(long)]
        case: PathBuf,
        /// Comma-separated train,val,test fractions.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Feasibility audit of a solution file against a case.
    Eval {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Train a model (T1 on one case, T2 on several).
    Train(RunArgs),
    /// Run a benchmark task.
    Task {
        #[arg(long)]
        task: Option<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint on the test split of unseen cases.
    Zeroshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "case", required = true)]
        cases: Vec<PathBuf>,
    },
    /// Linear probes and PCA on a checkpoint's bus activations.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: PathBuf,
        /// Number of operating points to collect activations from.
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 1e-6)]
        lambda: f64,
    },
    /// Aggregate run reports over seeds; optionally fit a size scaling law.
    Report {
        /// Run directories containing `report.json`.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        scaling: bool,
    },
    /// Generate a synthetic solved case family.
    Synth {
        #[arg(long)]
        buses: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long)]
        case_id: Option<String>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Training case files.
    #[arg(long = "case")]
    cases: Vec<PathBuf>,
    /// Held-out case files.
    #[arg(long = "eval-case")]
    eval_cases: Vec<PathBuf>,
    /// Pretrained checkpoint (T4).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    cost_weight: Option<f64>,
    #[arg(long)]
    model: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
