//! `teugels`: simulate, solve, optimize and check controlled stochastic
//! evolution equations driven by Teugels martingales.
//!
//! Exit status: 0 when every hard criterion passed, 1 when a hard
//! criterion failed, 2 for invalid configuration or model input, 3 for
//! numerical or I/O failures.

mod check;
mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use teugels_see::CauchyError;

use crate::config::ExperimentConfig;
use crate::output::Sink;

#[derive(Parser)]
#[command(name = "teugels", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `outputs.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Path-count override.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Simulate Lévy paths and the Teugels basis.
    Simulate,
    /// Solve the state equation under a fixed control.
    Solve,
    /// Optimize the control and check the optimality conditions.
    Optimize,
    /// Run the full property suite.
    Check,
}

enum Failure {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(err: anyhow::Error) -> Failure {
    let input = err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<CauchyError>(),
            Some(
                CauchyError::SuperParabolic { .. }
                    | CauchyError::Bound { .. }
                    | CauchyError::Invalid(_)
            )
        ) || cause.downcast_ref::<teugels_see::LevyError>().is_some()
            || cause.downcast_ref::<teugels_see::BasisError>().is_some()
    });
    if input {
        Failure::Input(err)
    } else {
        Failure::Runtime(err)
    }
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Input(anyhow::anyhow!("--config is required")))?;
    let mut cfg = ExperimentConfig::load(path).map_err(Failure::Input)?;
    cfg.apply_overrides(cli.seed, cli.paths, cli.out.clone())
        .map_err(Failure::Input)?;
    let mut sink = Sink::new(&cfg.outputs.directory).map_err(Failure::Runtime)?;
    let passed = match cli.command {
        Command::Simulate => commands::simulate(&cfg, &mut sink),
        Command::Solve => commands::solve(&cfg, &mut sink),
        Command::Optimize => commands::optimize(&cfg, &mut sink, cli.quiet),
        Command::Check => check::check(&cfg, &mut sink, cli.quiet),
    }
    .map_err(classify)?;
    if !cli.quiet {
        for file in sink.written() {
            println!("wrote {}", file.display());
        }
    }
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one hard criterion failed");
            ExitCode::from(1)
        }
        Err(Failure::Input(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(3)
        }
    }
}
