//! `pact`: train, evaluate and benchmark adaptive computation models.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pact_core::BlockMode;

#[derive(Debug, Parser)]
#[command(name = "pact", version, about = "Adaptive computation time with probabilistic halting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment description in TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; falls back to `output.dir`, then PACT_OUT_DIR, then `pact-out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.mode`.
        #[arg(long)]
        mode: Option<BlockMode>,
        /// Overrides `train.tau`.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Evaluate a checkpoint on held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `pact train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block mode; defaults to every mode listed in `eval.modes`.
        #[arg(long)]
        mode: Option<BlockMode>,
        /// Overrides `eval.examples`.
        #[arg(long)]
        examples: Option<usize>,
    },
    /// Train once per penalty value and tabulate accuracy against computation.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        tau: Vec<f64>,
    },
    /// Compare gradient variance of both estimators across latent groupings.
    Variance {
        #[command(flatten)]
        common: Common,
        /// Patch sizes of the grid model's halting latents.
        #[arg(long, value_delimiter = ',', required = true)]
        groupings: Vec<usize>,
    },
    /// Tabulate the ACT ponder cost against the first halting probability.
    PonderDemo {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Halting probabilities after the first iteration.
        #[arg(long, value_delimiter = ',')]
        tail: Option<Vec<f64>>,
        #[arg(long, default_value_t = pact_core::blocks::DEFAULT_PONDER_POINTS)]
        points: usize,
        #[arg(long, default_value_t = pact_core::blocks::DEFAULT_ACT_EPSILON)]
        epsilon: f64,
    },
}

/// How a command failed; selects the exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or input files (exit 2).
    Usage(String),
    /// The computation itself failed, e.g. diverged (exit 1).
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common, mode, tau } => commands::train(&common, mode, tau),
        Command::Eval {
            common,
            checkpoint,
            mode,
            examples,
        } => commands::eval(&common, &checkpoint, mode, examples),
        Command::SweepTau { common, tau } => commands::sweep_tau(&common, &tau),
        Command::Variance { common, groupings } => commands::variance(&common, &groupings),
        Command::PonderDemo {
            out,
            tail,
            points,
            epsilon,
        } => commands::ponder_demo(out, tail, points, epsilon),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
