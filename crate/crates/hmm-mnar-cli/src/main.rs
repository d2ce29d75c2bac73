//! Command-line toolkit for Gaussian hidden Markov models with missing
//! data: scenario simulation, multi-start EM fitting under ignorable and
//! state-dependent (MNAR) missingness, Viterbi/posterior decoding,
//! Monte-Carlo recovery studies, and model comparison.
//!
//! stdout carries human-readable progress only; machine-readable artifacts
//! (CSV tables, fitted-model TOML files) go to the paths given by `--out`
//! and friends, so runs can be scripted and diffed. Exit codes: 0 success,
//! 2 usage or input error, 3 fit budget exhausted (best iterate written).

mod cli;
mod commands;
mod config;
mod input;
mod model_file;

use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::Parser;

fn main() -> ExitCode {
    let parsed = match cli::Cli::try_parse() {
        Ok(parsed) => parsed,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(parsed: cli::Cli) -> anyhow::Result<ExitCode> {
    let config = config::load(parsed.config.as_deref())?;
    init_threads(parsed.threads, config.threads)?;
    match parsed.command {
        cli::Command::Simulate(args) => commands::simulate(args, &config),
        cli::Command::Fit(args) => commands::fit(args, &config),
        cli::Command::Decode(args) => commands::decode(args, &config),
        cli::Command::Study(args) => commands::study(args, &config),
        cli::Command::Select(args) => commands::select(args, &config),
    }
}

/// Thread count resolution: `--threads` flag, then the config file, then
/// the `HMM_MNAR_THREADS` environment variable; unset leaves the default
/// pool (one worker per core).
fn init_threads(flag: Option<usize>, file: Option<usize>) -> anyhow::Result<()> {
    let env = match std::env::var("HMM_MNAR_THREADS") {
        Ok(value) => Some(
            value
                .trim()
                .parse::<usize>()
                .with_context(|| format!("HMM_MNAR_THREADS=`{value}` is not a thread count"))?,
        ),
        Err(_) => None,
    };
    if let Some(n) = flag.or(file).or(env) {
        if n == 0 {
            anyhow::bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker thread pool")?;
    }
    Ok(())
}
