//! `intq`: train, quantize, lower, run and verify the toy pyramid model from
//! the command line.

mod commands;
mod config;
mod tensor_file;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intq_core::lowering::LowerMode;
use intq_core::pyramidlab::BnMode;
use intq_core::Error;

/// Exit status of a run that produced a failed verification report.
pub const EXIT_VERIFY_FAILED: u8 = 4;
pub const EXIT_VERSION: u8 = 3;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ERROR: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "intq", version, about = "Integer-only quantized inference for a toy pyramid model")]
pub struct Cli {
    /// TOML file overriding the built-in defaults; flags override the file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Global seed; every component seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a full-precision pyramid model and write a checkpoint.
    Train(TrainArgs),
    /// Fine-tune a full-precision checkpoint with fake quantization.
    Quantize(QuantizeArgs),
    /// Lower a quantized checkpoint to an integer plan.
    Lower(LowerArgs),
    /// Execute a plan on an input tensor file.
    Run(RunArgs),
    /// Check a plan against the checkpoint it was lowered from.
    Verify(VerifyArgs),
    /// Per-level statistics of the head normalization inputs.
    Stats(StatsArgs),
    /// Primitive census and energy estimate of a plan.
    Cost(CostArgs),
    /// Shared versus per-level normalization over several seeds.
    Experiment(ExperimentArgs),
    /// Write generated sample images as a tensor file.
    GenInput(GenInputArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bn_mode: Option<BnMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Per-epoch loss and accuracy as CSV.
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    /// Full-precision checkpoint to start from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bits: Option<u32>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LowerArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Largest shift of any dyadic multiplier.
    #[arg(long)]
    pub d_max: Option<u32>,
    /// Skip multiplier search: free numerator or power of two.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<LowerMode>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Tensor file of real images (`f64`) or input codes (`u8`).
    #[arg(long)]
    pub input: PathBuf,
    /// JSON file with the integer and dequantized outputs and the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of generated inputs; ignored with `--input`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Drift threshold as a fraction of the output range.
    #[arg(long)]
    pub drift_tol: Option<f64>,
    /// Real-valued tensor file to verify on instead of generated samples.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Write the report as `key=value` lines.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    /// Epoch tag written into every record.
    #[arg(long)]
    pub epoch: Option<usize>,
    /// Feed the value of this pyramid level to every level (control run).
    #[arg(long, value_name = "LEVEL")]
    pub identical_levels: Option<usize>,
    /// Records as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[arg(long)]
    pub plan: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Results CSV (`bn_mode,bits,seed,level,accuracy`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary table.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenInputArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
}

fn parse_mode(s: &str) -> Result<LowerMode, String> {
    match s {
        "aqd" => Ok(LowerMode::Aqd),
        "fqn" => Ok(LowerMode::Fqn),
        _ => Err(format!("{s:?} is not one of aqd, fqn")),
    }
}

/// Outcome of a command that ran to completion.
pub enum Outcome {
    Ok,
    VerifyFailed,
}

fn quote(msg: &str) -> String {
    msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::VersionMismatch { .. } => EXIT_VERSION,
        Error::Provenance { .. } => EXIT_VERIFY_FAILED,
        _ => EXIT_ERROR,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg=\"{}\"", quote(first));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::dispatch(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerifyFailed) => ExitCode::from(EXIT_VERIFY_FAILED),
        Err(e) => {
            eprintln!("error kind={} msg=\"{}\"", e.kind(), quote(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
