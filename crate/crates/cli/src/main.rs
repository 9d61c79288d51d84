//! `dtri`: train the three-model triangle, evaluate it, map the learned
//! energy landscape, recover occluded images, draw samples, and run the
//! gradient-check suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dtri", version, about = "Energy / generator / inference triangle training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Parser)]
struct CommonArgs {
    /// Run configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the config file's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Allow writing into an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train all three models jointly.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint: reconstruction MSE, energy gap, mode coverage.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Map the energy landscape into basins and a disconnectivity graph.
    Map {
        #[command(flatten)]
        common: CommonArgs,
        /// Map an analytic test surface instead of a checkpoint
        /// (doublewell | quartic2d).
        #[arg(long)]
        analytic: Option<String>,
    },
    /// Train from occluded images and track recovery error.
    Recover {
        #[command(flatten)]
        common: CommonArgs,
        /// Occlusion mask tag (P.5, P.7, MB10, B20, B30, salt:R, block:S,
        /// multiblock:CxS). Overrides the config file's `mask` key.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Draw generator samples from a checkpoint into a grid.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the full gradient-check suite; exits 0 iff all checks pass.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
}

/// Failures carrying the process exit code.
pub enum Failure {
    Usage(String),
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

impl From<dtri::Error> for Failure {
    fn from(e: dtri::Error) -> Self {
        match &e {
            dtri::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { common } => commands::train(&common),
        Command::Eval { common } => commands::eval(&common),
        Command::Map { common, analytic } => commands::map(&common, analytic.as_deref()),
        Command::Recover { common, mask } => commands::recover(&common, mask.as_deref()),
        Command::Sample { common } => commands::sample(&common),
        Command::Gradcheck { common } => commands::gradcheck(&common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
