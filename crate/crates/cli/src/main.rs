//! `lczlab`: generate synthetic SAR-MSI datasets, train fusion classifiers,
//! sweep ablations, and emit evaluation reports.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

mod commands;
mod config;
mod gridmap;

use clap::{Parser, Subcommand};
use lczlab_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lczlab", version, about = "SAR-MSI fusion classification laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic SAR-MSI dataset.
    Generate(commands::GenerateArgs),
    /// Train one fusion variant and write checkpoint, log, and summary.
    Train(commands::TrainArgs),
    /// Train several variants on identical splits and tabulate them.
    Ablate(commands::AblateArgs),
    /// Evaluate a checkpoint and write metric report, confusion CSV, and
    /// label grid maps.
    Report(commands::ReportArgs),
}

/// Flags shared by every subcommand.
#[derive(clap::Args, Clone)]
pub struct CommonArgs {
    /// JSON config file with flat dotted keys (e.g. "train.epochs"); command
    /// line flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => commands::generate(args),
        Command::Train(args) => commands::train(args).map(|_| ()),
        Command::Ablate(args) => commands::ablate(args),
        Command::Report(args) => commands::report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parameter(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
