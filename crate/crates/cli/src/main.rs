//! `strtr`: generate data, train, evaluate, check gradients and export
//! attention weights.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use strtr::data::Split;

use crate::run_config::Arch;

#[derive(Debug, Parser)]
#[command(name = "strtr", version, about = "Skeleton action recognition with relative transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic skeleton dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        joints: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train a model and write a checkpoint plus per-epoch history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Named training settings: default, ntu60, ntu120, uav, desk.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Base architecture when the config gives no explicit model.
        #[arg(long, value_enum)]
        arch: Option<Arch>,
    },
    /// Evaluate a checkpoint; writes metrics.json and confusion.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Splits to evaluate (repeatable).
        #[arg(long, value_enum)]
        split: Vec<SplitArg>,
    },
    /// Compare backpropagated gradients of the tiny model with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Scales the ReLU backward rule; for testing the checker itself.
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Dump every attention row of one sample as JSON.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sample index within the dataset.
        #[arg(long)]
        sample: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

fn splits(args: &[SplitArg]) -> Vec<Split> {
    let mut out = Vec::new();
    for a in args {
        let add: &[Split] = match a {
            SplitArg::Train => &[Split::Train],
            SplitArg::Val => &[Split::Val],
            SplitArg::Test => &[Split::Test],
            SplitArg::All => &[Split::Train, Split::Val, Split::Test],
        };
        for s in add {
            if !out.contains(s) {
                out.push(*s);
            }
        }
    }
    out
}

/// Failure classes that map onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<strtr::Error> for Failure {
    fn from(e: strtr::Error) -> Self {
        match e {
            strtr::Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            common,
            classes,
            per_class,
            joints,
            frames,
        } => commands::gen_data(common, classes, per_class, joints, frames),
        Command::Train {
            common,
            data,
            preset,
            epochs,
            arch,
        } => commands::train(common, data, preset, epochs, arch),
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
        } => commands::eval(common, checkpoint, data, (!split.is_empty()).then(|| splits(&split))),
        Command::Gradcheck {
            common,
            eps,
            batch,
            tolerance,
            inject_fault,
        } => commands::gradcheck(common, eps, batch, tolerance, inject_fault),
        Command::ExportAttention {
            common,
            checkpoint,
            data,
            sample,
        } => commands::export_attention(common, checkpoint, data, sample),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
