//! Command-line argument declarations.
//!
//! Every value flag is optional here; resolution order is flag, then the
//! matching key of the `--config` file, then the built-in default, and the
//! command implementations reject a setting that is still missing after
//! that. Exit codes: 0 success, 2 usage or input error, 3 fit budget
//! exhausted (with the best iterate written).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "hmm-mnar",
    version,
    about = "Gaussian hidden Markov models with missing data: simulate, fit, decode, study, compare",
    arg_required_else_help = true
)]
pub struct Cli {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads (overrides HMM_MNAR_THREADS; default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset (and its true state paths) from a built-in scenario.
    Simulate(SimulateArgs),
    /// Fit a model by multi-start EM and write a self-describing model file.
    Fit(FitArgs),
    /// Write Viterbi MAP states and smoothed posteriors for every record.
    Decode(DecodeArgs),
    /// Run a Monte-Carlo parameter-recovery study on a built-in scenario.
    Study(StudyArgs),
    /// Compare fitted models by AIC/BIC, optionally with a likelihood-ratio test.
    Select(SelectArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Built-in scenario name (an unknown name lists the valid ones).
    #[arg(long)]
    pub scenario: Option<String>,
    /// Generator seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset CSV to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// True-state CSV to write [default: <out>.paths.csv].
    #[arg(long, value_name = "FILE")]
    pub paths_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input data: dataset CSV, clinical CSV, or whitespace long format.
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Number of hidden states.
    #[arg(long, value_name = "K")]
    pub states: Option<usize>,
    /// Missingness treatment: ignorable, state, or logistic [default: ignorable].
    #[arg(long, value_name = "KIND")]
    pub missingness: Option<String>,
    /// Covariates of the logistic missingness model (schema names).
    #[arg(long, value_name = "NAMES", value_delimiter = ',')]
    pub missing_covariates: Option<Vec<String>>,
    /// Constraint: none or equal-across-states [default: none].
    #[arg(long, value_name = "NAME")]
    pub constraint: Option<String>,
    /// Random starts beside the moment-based one [default: 8].
    #[arg(long, value_name = "N")]
    pub starts: Option<usize>,
    /// Seed for the random starts [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// EM iteration cap [default: 500].
    #[arg(long, value_name = "N")]
    pub max_iter: Option<usize>,
    /// Log-likelihood convergence tolerance in nats [default: 1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Lower bound for fitted emission standard deviations.
    #[arg(long)]
    pub sigma_floor: Option<f64>,
    /// Warm-start from a fitted-model file instead of multi-start.
    #[arg(long, value_name = "FILE")]
    pub init: Option<PathBuf>,
    /// Fitted-model TOML to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Fitted-model file from `fit`.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Input data (same layouts as `fit --data`).
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
    /// Per-record MAP state and posterior CSV to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also write per-group, per-week MAP state fractions to this CSV.
    #[arg(long, value_name = "FILE")]
    pub week_summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Built-in scenario name.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Monte-Carlo replications.
    #[arg(long, value_name = "N")]
    pub replications: Option<usize>,
    /// Model families to fit per replication: ignorable, state, logistic
    /// [default: ignorable,state].
    #[arg(long, value_name = "NAMES", value_delimiter = ',')]
    pub families: Option<Vec<String>>,
    /// Master seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// EM iteration cap per fit [default: 500].
    #[arg(long, value_name = "N")]
    pub max_iter: Option<usize>,
    /// EM convergence tolerance [default: 1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Monte-Carlo series count for the oracle benchmarks [default: 2000].
    #[arg(long, value_name = "N")]
    pub oracle_draws: Option<usize>,
    /// Parameter-recovery CSV to write (recovery/oracle summary goes to
    /// <out>.recovery.csv).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Fitted-model files to compare.
    #[arg(long, value_name = "FILES", num_args = 1..)]
    pub models: Vec<PathBuf>,
    /// Labels for the comparison rows [default: file stems].
    #[arg(long, value_name = "NAMES", value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Observation count for the BIC penalty [default: stored in the files].
    #[arg(long, value_name = "N")]
    pub nobs: Option<usize>,
    /// Likelihood-ratio test between two labeled models, as FULL:RESTRICTED.
    #[arg(long, value_name = "PAIR")]
    pub lrt: Option<String>,
    /// Comparison CSV to write.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Likelihood-ratio test CSV to write [default: <out>.lrt.csv].
    #[arg(long, value_name = "FILE")]
    pub lrt_out: Option<PathBuf>,
}
