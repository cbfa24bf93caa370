//! `sscap` — prepare data, train the caption model, evaluate checkpoints,
//! and tabulate reports from the command line.
//!
//! Exit codes: 0 success, 2 input or usage error, 3 state-compatibility
//! error (checkpoint/config mismatch or an out-of-order schedule), 4
//! numerical failure during training.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use sscap_core::Error;

#[derive(Parser)]
#[command(name = "sscap", version, about = "Semi-supervised captioning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or split datasets and build embedding caches.
    Prepare(commands::PrepareArgs),
    /// Run a training schedule from a TOML config.
    Train(commands::TrainArgs),
    /// Score a checkpoint on an evaluation manifest.
    Evaluate(commands::EvaluateArgs),
    /// Convert stage reports and sweep summaries to CSV tables.
    Report(commands::ReportArgs),
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Sequencing(_) | Error::Compatibility(_) => 3,
        Error::NonFiniteLoss(_) => 4,
        _ => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(args) => commands::cmd_prepare(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Evaluate(args) => commands::cmd_evaluate(args),
        Command::Report(args) => commands::cmd_report(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
