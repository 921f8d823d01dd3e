//! `cyclegan`: train, stylize and report.

mod report;
mod stylize;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cyclegan", version, about = "Unpaired photo ↔ Monet style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train both generators and discriminators on `<data>/photos` and `<data>/monet`.
    Train(train::TrainArgs),
    /// Translate one image with a trained checkpoint.
    Stylize(StylizeArgs),
    /// Summarize a losses.csv, optionally against a baseline run.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Photo2monet,
    Monet2photo,
}

#[derive(Debug, clap::Args)]
pub struct StylizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "photo2monet")]
    pub direction: Direction,
}

#[derive(Debug, clap::Args)]
pub struct ReportArgs {
    /// Loss table of the run to summarize.
    #[arg(long)]
    pub losses: PathBuf,
    /// Earlier run to compare against; deltas are `losses − baseline`.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => train::run(&args),
        Command::Stylize(args) => stylize::run(&args).map_err(Failure::from),
        Command::Report(args) => report::run(&args).map_err(Failure::from),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
