mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mdfn::network::Variant;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mdfn::Error),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Usage(String),

    #[error("checkpoint holds a {found} model but {expected} was requested")]
    VariantMismatch { expected: Variant, found: Variant },

    #[error("output directory {0} is not empty (use --force)")]
    OutputExists(PathBuf),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config(_) => "config",
            CliError::Usage(_) => "usage",
            CliError::VariantMismatch { .. } => "variant_mismatch",
            CliError::OutputExists(_) => "output_exists",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

/// Multi-scale deep feature detector on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "mdfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset as PPM images, JSON-lines annotations and a manifest.
    Dataset(DatasetArgs),
    /// Train a detector; writes train.jsonl, checkpoints and summary.json.
    Train(TrainArgs),
    /// Score a checkpoint (or injected detections); writes ap.json and strata.json.
    Eval(EvalArgs),
    /// Detect objects in one PPM image; writes detections.json and render.ppm.
    Infer(InferArgs),
    /// Print per-module parameter and mult-add counts.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DatasetArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the scene seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (initialisation, batch order, flips).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Train on a dataset directory written by `mdfn dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the jitter seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Refuse checkpoints of any other variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Evaluate a dataset directory written by `mdfn dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Binary PPM (P6) input.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Render these detections (a JSON array) instead of running a model.
    #[arg(long)]
    inject: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, default_value = "mdfn-i2")]
    variant: Variant,
    /// Also write report.json here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Dataset(a) => commands::dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Report(a) => commands::report(a),
    }
}

fn error_line(message: &str, kind: &str) -> String {
    json!({ "error": message, "kind": kind }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let message = rendered.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", error_line(message, "usage"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e.to_string(), e.kind()));
            ExitCode::FAILURE
        }
    }
}
