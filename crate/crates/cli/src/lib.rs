//! `gldn` command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime and numeric failures.

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

pub use commands::{eval_metrics, EvalReport};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "gldn",
    version,
    about = "Brain-age regression with a global/local dependency network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a model and write `best.ckpt` and `metrics.jsonl`.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; prints metrics as JSON.
    Eval(EvalArgs),
    /// Finite-difference check of every op, layer and the tiny model.
    Gradcheck(GradcheckArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
    /// Print the default configuration file.
    Config,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    /// Extents `DxHxW`.
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Train, validation and test fractions, comma separated.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub fractions: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// full, no_cnn or no_transformer.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Cross-validate over this many folds of the non-test records.
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only `seed` is read from the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 24)]
    pub max_coords: usize,
    /// Add an op with a wrong backward rule.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<gldn_core::Error>() {
            Some(gldn_core::Error::Config(_) | gldn_core::Error::Argument(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure { code, error }
    }
}

impl From<gldn_core::Error> for Failure {
    fn from(e: gldn_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl Failure {
    pub fn usage(msg: impl std::fmt::Display) -> Self {
        Failure {
            code: EXIT_USAGE,
            error: anyhow::anyhow!("{msg}"),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Config => {
            print!("{}", gldn_core::RunConfig::default().render());
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and reports errors on stderr.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
