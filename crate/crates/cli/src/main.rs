//! `ctxmask`: train a multi-task Q-network, learn per-task weight masks,
//! and analyse the resulting subnetworks.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ctxmask", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, env = "CTXMASK_OUTPUT_ROOT")]
    out: Option<PathBuf>,
    /// Replace existing output files.
    #[arg(long)]
    overwrite: bool,
    /// Override the seed used by this command.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the multi-task Q-network; writes checkpoint.json and train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Learn task masks over a trained checkpoint; writes mask_task<k>.json and mask_log.csv.
    Prune {
        #[command(flatten)]
        common: Common,
        /// checkpoint.json written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task index to prune for
        #[arg(long, conflicts_with = "all_tasks", required_unless_present = "all_tasks")]
        task: Option<usize>,
        /// Prune for every task
        #[arg(long)]
        all_tasks: bool,
    },
    /// Compare masks and evaluate every subnetwork on every task; writes
    /// report.json and return_matrix.csv.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// checkpoint.json the masks were learned on
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mask files, one per task
        #[arg(long = "mask", required = true, num_args = 1..)]
        masks: Vec<PathBuf>,
        /// Episodes per return-matrix cell; defaults to eval.episodes
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Greedy evaluation of the full network, or a masked one, on one task.
    Eval {
        #[command(flatten)]
        common: Common,
        /// checkpoint.json written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate this subnetwork instead of the full network
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Task index
        #[arg(long)]
        task: usize,
        /// Defaults to eval.episodes
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
