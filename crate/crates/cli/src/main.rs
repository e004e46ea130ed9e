mod commands;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use omr_core::corpus::CorpusError;
use omr_core::curate::CurateError;
use omr_core::dedup::DedupError;
use omr_core::distill::DistillError;
use omr_core::evalrun::EvalError;
use omr_core::verify::VerifyError;
use omr_rl::toylab::ToyError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Dedup(#[from] DedupError),
    #[error(transparent)]
    Curate(#[from] CurateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "omr", version, about = "Multimodal reasoning data pipeline and RL toolkit")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Global {
    /// JSON file of default option values; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Upper bound on parallel workers (default: available cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Read raw JSON Lines records into a manifest.
    Ingest(commands::IngestArgs),
    /// Normalize questions and record the output format contract.
    Normalize(commands::ManifestArg),
    /// Sample reasoning traces from the teacher.
    Distill(commands::DistillArgs),
    /// Verify traces against gold answers and record pass rates.
    Verify(commands::VerifyArgs),
    /// Remove near-duplicate records.
    Dedup(commands::DedupArgs),
    /// Filter by difficulty and trace length.
    Curate(commands::CurateArgs),
    /// Pack traces into fixed-capacity batches.
    Pack(commands::PackArgs),
    /// Weighted interleave of several manifests.
    Mix(commands::MixArgs),
    /// Corpus statistics.
    Stats(commands::StatsArgs),
    /// Train the toy policy.
    RlTrain(commands::RlTrainArgs),
    /// Run the gradient oracle suite.
    RlCheck(commands::RlCheckArgs),
    /// Score a model on a manifest.
    Eval(commands::EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
