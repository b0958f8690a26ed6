use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clusterlab::Error;

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "clusterlab", version, about = "Cluster-guided consistent-subject diffusion on a toy latent world")]
pub struct Cli {
    /// JSON run configuration; unspecified fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory holding inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the default world (or validate a world file) plus its vocabulary.
    MakeWorld {
        /// Existing world spec to validate and copy instead of the default.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train the base denoiser.
    TrainBase {
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from `<out>/denoiser.json`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps (for staged runs).
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Generate proposals and pick the target.
    GenBase {
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        target_index: Option<usize>,
    },
    /// Tune the projector on the base set.
    Tune {
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Cluster-guided sampling for one context.
    Sample {
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Capture rate over contexts and seeds, with the unguided baseline.
    Eval {
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Sweep one guidance parameter.
    Sweep {
        #[arg(long, value_parser = ["v", "eta1", "eta2", "window"])]
        axis: String,
    },
    /// Exact-score guided sampling on the world itself.
    Oracle {
        #[arg(long, default_value_t = 2.0)]
        eta1: f64,
        #[arg(long, default_value_t = 0.0)]
        eta2: f64,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long)]
        context: Option<String>,
    },
}

#[derive(clap::Args, Debug, Clone, Default)]
pub struct GuidanceArgs {
    #[arg(long)]
    pub eta1: Option<f64>,
    #[arg(long)]
    pub eta2: Option<f64>,
    #[arg(long)]
    pub v: Option<f64>,
    /// Cluster-guidance window as START-END.
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub aver_as_empty: bool,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;
pub const EXIT_IO: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
