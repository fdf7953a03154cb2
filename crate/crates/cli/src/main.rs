mod commands;
mod inputs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn input(e: impl std::fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "trainsim",
    version,
    about = "Training-graph compiler and accelerator cost model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Builtin name (resnet-desk, gpt-desk, probe-chain) or workload JSON file.
    #[arg(long, default_value = "resnet-desk")]
    pub workload: String,
    /// Template name (edge-tpu, fusemax) or hardware JSON file; edge-tpu
    /// when absent.
    #[arg(long, alias = "template")]
    pub hardware: Option<String>,
    /// `auto` or a mapping JSON file.
    #[arg(long, default_value = "auto")]
    pub mapping: String,
    /// `off`, `auto:N` or `manual:FILE`.
    #[arg(long, default_value = "auto:6")]
    pub fusion: String,
    /// Optimizer appended when a forward workload is turned into a training graph.
    #[arg(long, default_value = "sgd")]
    pub optimizer: String,
    /// `cross-entropy` or `mse`.
    #[arg(long, default_value = "cross-entropy")]
    pub loss: String,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a builtin workload as a workload file.
    Build {
        /// resnet-desk or gpt-desk.
        #[arg(long, default_value = "resnet-desk")]
        workload: String,
        /// Builder config JSON overriding the desk defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward graph to training graph, or apply a checkpoint plan to a training graph.
    Transform {
        #[command(flatten)]
        common: Common,
        /// Checkpoint plan JSON to apply.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Schedule one workload on one accelerator.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// inference, training or both; defaults to the workload's own kind.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Per-node timeline CSV (single mode only).
        #[arg(long)]
        timeline: Option<PathBuf>,
    },
    /// Solve the layer-fusion partition.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Memory-budgeted checkpoint plan minimizing recompute cost.
    CheckpointMilp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        budget: u64,
    },
    /// NSGA-II search over checkpoint plans.
    CheckpointGa {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 32)]
        pop: usize,
        #[arg(long, default_value_t = 4)]
        gens: usize,
        #[arg(long, env = "MONET_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Compare recomputing two activations jointly against separately.
    ProbeNonadditivity {
        #[command(flatten)]
        common: Common,
        /// Two activation edge ids, `A,B`.
        #[arg(long)]
        pair: Option<String>,
    },
    /// Evaluate a workload over a hardware parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// table1-sub, table1-full, table2-sub, table2-full or a grid JSON file.
        #[arg(long, default_value = "table1-sub")]
        grid: String,
        #[arg(long, default_value = "both")]
        mode: String,
    },
    /// SVG scatter of two CSV columns colored by a third.
    Plot {
        input: PathBuf,
        #[arg(long)]
        x: Option<String>,
        #[arg(long)]
        y: Option<String>,
        #[arg(long)]
        color: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
