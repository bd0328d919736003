//! The `bnrm` command-line driver.
//!
//! Subcommands generate synthetic data, train reward models and run the
//! analyses. Every command reads its randomness from the config seed, so
//! identical inputs give byte-identical outputs.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bnrm", version, about = "Bayesian non-negative reward models at desk scale")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (gen-data, train) or CSV file (analyses).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the config with defaults filled in, then exit.
    #[arg(long, global = true)]
    pub print_effective_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerArg {
    /// The trained checkpoint.
    Model,
    Gold,
    Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolArg {
    Natural,
    Adversarial,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/val/hard JSONL splits and a provenance file.
    GenData,
    /// Train the configured method on `<data>/train.jsonl`, validating on `val.jsonl`.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Pairwise accuracy of a checkpoint on a JSONL file or every split in a directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Length/reward correlation with log-spaced length buckets.
    BiasReport {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSONL file, or a directory whose `hard.jsonl` is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "model")]
        scorer: ScorerArg,
        #[arg(long)]
        buckets: Option<usize>,
    },
    /// Best-of-N proxy and gold curves over generated candidate pools.
    Bon {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        proxy: Option<ScorerArg>,
        #[arg(long, value_enum)]
        pool: Option<PoolArg>,
    },
    /// Posterior-mean factors per pair with role labels (BNRM only).
    DumpFactors {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL file, or a directory whose `val.jsonl` is used.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        top_k: Option<usize>,
    },
}

/// Parses `args` and runs the command, writing summaries to `stdout` and
/// diagnostics to `stderr`. Returns the process exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(stdout, "{e}")
            } else {
                write!(stderr, "{e}")
            };
            return code;
        }
    };
    match commands::execute(&cli, stdout) {
        Ok(()) => error::EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
