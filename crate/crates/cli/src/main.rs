mod commands;
mod manifest;
mod pgm;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ibev_core::Error;

/// Exit codes shared by every command.
pub mod exit {
    pub const OK: u8 = 0;
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const NUMERIC: u8 = 4;
    pub const CHECK: u8 = 5;
}

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: exit::CONFIG, message: message.into() }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Failure { code: exit::CHECK, message: message.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure { code: exit::IO, message: format!("io error on {}: {e}", path.display()) }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Dimension { .. } | Error::Data(_) | Error::Generation(_) => exit::CONFIG,
            Error::Io { .. } | Error::Format { .. } => exit::IO,
            Error::NonFinite { .. } | Error::Pose(_) | Error::Ray(_) => exit::NUMERIC,
            Error::CheckFailure { .. } => exit::CHECK,
        };
        Failure { code, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Parser, Debug)]
#[command(name = "ibev", version, about = "Instance-BEV occupancy prediction on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Worker threads for kernels.
    #[arg(long, global = true, env = "IBEV_THREADS", default_value_t = 1)]
    pub threads: usize,
    /// Force single-threaded, bit-reproducible reductions.
    #[arg(long, global = true)]
    pub deterministic: bool,
}

impl Global {
    /// Threads actually used: kernels are sequential, and deterministic mode pins one.
    pub fn effective_threads(&self) -> usize {
        1
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic scenes.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a directory of scenes.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Scene used for periodic evaluation; synthesized from the config when absent.
        #[arg(long)]
        eval_scene: Option<PathBuf>,
        /// Stop (with a checkpoint) once this step is reached, keeping the configured schedule.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a checkpoint (or the reference itself) with RayIoU.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the reference labels as the prediction.
        #[arg(long)]
        oracle: bool,
        /// Evaluation settings when no checkpoint is given.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict a label grid for one scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Validated and recorded; the suite uses fixed small shapes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
    /// Attention cost sweep.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [20usize, 50, 100, 200])]
        ni_list: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096, 16384])]
        nb_list: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        /// Skip timing the kernels; cost columns only.
        #[arg(long)]
        no_timing: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::CONFIG } else { exit::OK });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
