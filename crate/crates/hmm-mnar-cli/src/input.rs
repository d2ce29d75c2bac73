//! Input-file sniffing.
//!
//! Three on-disk layouts are accepted everywhere a command takes `--data`:
//!
//! * the generic dataset CSV written by `simulate` (header `id,t,y,m,...`),
//! * the clinical CSV written for the trial application (header
//!   `id,week,imps79,missing,drug,main`),
//! * raw whitespace-delimited long format (columns id, response, week,
//!   treatment; `.`/`NA` for missing responses), which is grid-expanded to
//!   one record per subject-week.
//!
//! The layout is decided from the header line, never from the file name.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use hmm_mnar::dataio::{clinical_from_csv, dataset_from_csv, parse_long, LongFormat};
use hmm_mnar::model::Dataset;

pub struct LoadedData {
    pub dataset: Dataset,
    /// Human-readable description of the detected layout.
    pub layout: &'static str,
    pub warnings: Vec<String>,
}

pub fn load(path: &Path) -> Result<LoadedData> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let fields: Vec<&str> = header.split(',').map(str::trim).collect();
    let loaded = if fields.len() >= 4 && fields[..4] == ["id", "t", "y", "m"] {
        LoadedData {
            dataset: dataset_from_csv(&text)?,
            layout: "dataset CSV",
            warnings: Vec::new(),
        }
    } else if fields == ["id", "week", "imps79", "missing", "drug", "main"] {
        LoadedData {
            dataset: clinical_from_csv(&text)?,
            layout: "clinical CSV",
            warnings: Vec::new(),
        }
    } else {
        let report = parse_long(&text, &LongFormat::default()).with_context(|| {
            format!(
                "{} is not a recognized CSV layout and failed to parse as whitespace long format",
                path.display()
            )
        })?;
        LoadedData {
            dataset: report.dataset,
            layout: "long format (grid-expanded)",
            warnings: report.warnings,
        }
    };
    Ok(loaded)
}

/// One progress line for a loaded dataset.
pub fn describe(path: &Path, data: &LoadedData) -> String {
    let d = &data.dataset;
    format!(
        "loaded {} [{}]: {} series, {} records ({} observed, {} missing)",
        path.display(),
        data.layout,
        d.n_series(),
        d.n_records(),
        d.n_observed(),
        d.n_missing()
    )
}
