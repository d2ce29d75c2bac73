//! Optional TOML configuration files.
//!
//! A configuration file carries defaults for any subset of the flags, one
//! table per subcommand plus a top-level `threads` key:
//!
//! ```toml
//! threads = 4
//!
//! [fit]
//! states = 3
//! missingness = "logistic"
//! missing_covariates = ["week", "main"]
//! starts = 20
//! seed = 7
//! max_iter = 1500
//! tol = 1e-7
//!
//! [study]
//! scenario = "sim1"
//! replications = 100
//! families = ["ignorable", "state"]
//! ```
//!
//! Values given on the command line always override the file. Unknown keys
//! are rejected so typos fail loudly instead of silently falling back to
//! defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub threads: Option<usize>,
    #[serde(default)]
    pub simulate: SimulateTable,
    #[serde(default)]
    pub fit: FitTable,
    #[serde(default)]
    pub decode: DecodeTable,
    #[serde(default)]
    pub study: StudyTable,
    #[serde(default)]
    pub select: SelectTable,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateTable {
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub paths_out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitTable {
    pub data: Option<PathBuf>,
    pub states: Option<usize>,
    pub missingness: Option<String>,
    pub missing_covariates: Option<Vec<String>>,
    pub constraint: Option<String>,
    pub starts: Option<usize>,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub sigma_floor: Option<f64>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeTable {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub week_summary: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyTable {
    pub scenario: Option<String>,
    pub replications: Option<usize>,
    pub families: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub oracle_draws: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectTable {
    pub models: Option<Vec<PathBuf>>,
    pub labels: Option<Vec<String>>,
    pub nobs: Option<usize>,
    pub lrt: Option<String>,
    pub out: Option<PathBuf>,
    pub lrt_out: Option<PathBuf>,
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: FileConfig =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(config)
}
