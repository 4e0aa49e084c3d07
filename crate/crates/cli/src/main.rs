//! Command-line surface: training, restoration, evaluation, the oracle
//! selfcheck and the comparison studies, all driven by config files with
//! `--set` overrides.
//!
//! Exit codes: 0 success, 1 validation/config errors, 2 runtime failures.
//! Errors go to stderr with an `ERROR:` prefix; logs go to stderr; stdout
//! carries only the documented result columns.

mod commands;
mod traincfg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use pnpgrad::Error;

#[derive(Parser)]
#[command(name = "pnpgrad", version, about = "Plug-and-play restoration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Config file (flat key=value with [section] headers)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one config entry as section.key=value; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Override the [experiment] seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-image parallelism
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    /// Override the [output] dir
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Compute in double precision instead of single
    #[arg(long, global = true)]
    pub fp64: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train the denoiser alone
    Pretrain,
    /// Train the denoiser and the gradient network jointly
    TrainJoint,
    /// Degrade and restore images, writing a report
    Restore,
    /// Evaluate trained networks on held-out patches
    Eval,
    /// Run the oracle suite and print pass/fail per check
    Selfcheck,
    /// Run an ablation or stability study
    Study,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dimension(_)
        | Error::InvalidArgument(_)
        | Error::Unsupported(_)
        | Error::Parse { .. }
        | Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("ERROR: {e}");
            return ExitCode::from(1);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
