//! Command-line driver for the dual-stream transformer workbench.
//!
//! One subcommand per pipeline stage: train, trace, features, cluster,
//! ari, ablate, steer, report. A flat key=value config file can supply any
//! option; explicit flags override it. Every output directory receives a
//! manifest with hashes of the files the run read and wrote.

mod cmd;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use config::Config;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "headforge", version, about = "Dual-stream transformer workbench")]
struct Cli {
    /// Flat key=value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a token corpus and write a checkpoint.
    Train(cmd::train::Args),
    /// Capture prediction traces from a trained checkpoint.
    Trace(cmd::trace::Args),
    /// Extract a feature matrix from a trace file.
    Features(cmd::features::Args),
    /// Cluster a feature matrix with k-means or the density pipeline.
    Cluster(cmd::cluster::Args),
    /// Adjusted Rand index between two label files.
    Ari(cmd::ari::Args),
    /// Scale or zero attention heads over a task suite.
    Ablate(cmd::ablate::Args),
    /// Sweep head scales over a grid and report the response curve.
    Steer(cmd::steer::Args),
    /// Summarize a run directory into plot-ready tables.
    Report(cmd::report::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => match Config::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(1);
            }
        },
        None => Config::default(),
    };
    let result = match cli.command {
        Command::Train(args) => cmd::train::run(&cfg, args),
        Command::Trace(args) => cmd::trace::run(&cfg, args),
        Command::Features(args) => cmd::features::run(&cfg, args),
        Command::Cluster(args) => cmd::cluster::run(&cfg, args),
        Command::Ari(args) => cmd::ari::run(args),
        Command::Ablate(args) => cmd::ablate::run(&cfg, args),
        Command::Steer(args) => cmd::steer::run(&cfg, args),
        Command::Report(args) => cmd::report::run(&cfg, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
