//! `deconforge`: simulate benchmark data, fit the sampler, score fits against
//! known truths and summarize an archive.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
//! failure inside the sampler.

mod commands;
mod manifest;
#[cfg(test)]
mod tests;

use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use deconforge_core::Error;

use commands::{EvaluateArgs, FitArgs, SimulateArgs, SummarizeArgs};

#[derive(Parser, Debug)]
#[command(name = "deconforge", version, about = "Covariate-informed multivariate density deconvolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate replicate data sets from a simulation design.
    Simulate(SimulateArgs),
    /// Run the MCMC sampler and write a posterior archive.
    Fit(FitArgs),
    /// Median ISE and selection frequencies over replicate fits.
    Evaluate(EvaluateArgs),
    /// Plain-text report of a posterior archive.
    Summarize(SummarizeArgs),
}

/// Caps the rayon pool when `DECONFORGE_THREADS` is set.
fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DECONFORGE_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().with_context(|| format!("DECONFORGE_THREADS={v:?} is not a count"))?;
    if n == 0 {
        bail!("DECONFORGE_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().filter_map(|e| e.downcast_ref::<Error>()).any(Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Summarize(a) => commands::summarize(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
