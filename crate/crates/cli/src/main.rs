//! `ynet`: phantom generation, training, prediction, baselines and
//! evaluation from the command line.
//!
//! Exit codes: 0 on success, 1 when a run fails (for example a diverging
//! loss or an unreadable file), 2 for usage and configuration errors.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "ynet", version, about = "Patch-based 3D vessel segmentation on synthetic phantoms")]
struct Cli {
    /// JSON run configuration; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel loops. With 1 every output is
    /// bit-reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom dataset (YVOL pairs and manifest.json).
    Phantom(commands::PhantomArgs),
    /// Train a model; writes best.ynet and train_log.csv.
    Train(commands::TrainArgs),
    /// Segment volumes with a checkpoint; writes probability and label
    /// volumes, MIPs and threshold.json.
    Predict(commands::PredictArgs),
    /// Segment volumes with a classical method.
    Baseline(commands::BaselineArgs),
    /// Compare a label volume with ground truth; prints a CSV row.
    Eval(commands::EvalArgs),
    /// Render the three maximum-intensity projections of a volume.
    Mip(commands::MipArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Phantom(a) => commands::phantom(cfg, a),
        Command::Train(a) => commands::train(cfg, a),
        Command::Predict(a) => commands::predict(cfg, a),
        Command::Baseline(a) => commands::baseline(cfg, a),
        Command::Eval(a) => commands::eval(a),
        Command::Mip(a) => commands::mip(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
