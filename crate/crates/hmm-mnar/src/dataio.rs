//! Longitudinal data ingestion and missingness diagnostics.
//!
//! The long format handled here is the usual clinical-trial layout: one
//! whitespace-delimited row per observed subject-week, with columns for
//! subject id, response, week, and treatment (extra columns ignored).
//! Loading expands each subject to the full week grid 0..=6, inserting
//! explicit missing records for absent weeks, and attaches three per-record
//! covariates: `week` (metric 0-6), `main` (1 on the designed measurement
//! occasions, weeks 0, 1, 3, and 6), and `drug` (treatment indicator,
//! constant within subject).
//!
//! [`glm_missingness`] fits the state-independent logistic regression of
//! the missingness indicator on chosen covariates and interactions — the
//! standard first diagnostic before reaching for state-dependent
//! missingness models.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{HmmError, Result};
use crate::glm::{logistic_covariance, logistic_irls, SolverOptions};
use crate::model::{Dataset, Record, Schema, TimeSeries};
use crate::special::normal_cdf;

/// Week grid every subject is expanded to.
const WEEKS: std::ops::RangeInclusive<u32> = 0..=6;
/// Designed measurement occasions.
const MAIN_WEEKS: [u32; 4] = [0, 1, 3, 6];

/// Column layout and parsing conventions of the long-format file.
#[derive(Debug, Clone)]
pub struct LongFormat {
    pub id_col: usize,
    pub response_col: usize,
    pub week_col: usize,
    pub treatment_col: usize,
    /// Tokens in the response column meaning "present row, missing value".
    pub missing_tokens: Vec<String>,
    /// Inclusive range outside which responses draw a warning (not an
    /// error; odd ratings are kept).
    pub response_range: (f64, f64),
}

impl Default for LongFormat {
    fn default() -> Self {
        LongFormat {
            id_col: 0,
            response_col: 1,
            week_col: 2,
            treatment_col: 3,
            missing_tokens: vec![".".into(), "NA".into()],
            response_range: (1.0, 7.0),
        }
    }
}

/// A loaded dataset plus ingestion bookkeeping.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub dataset: Dataset,
    /// Data rows in the file (excluding blank lines).
    pub n_rows: usize,
    /// Rows whose response column held a missing token.
    pub n_token_missing: usize,
    pub warnings: Vec<String>,
}

/// Parse long-format text. See [`load_long`] for the file-path variant.
pub fn parse_long(text: &str, format: &LongFormat) -> Result<LoadReport> {
    let needed = 1 + format
        .id_col
        .max(format.response_col)
        .max(format.week_col)
        .max(format.treatment_col);
    // (id, per-week slots, drug); insertion-ordered by first appearance.
    let mut order: Vec<String> = Vec::new();
    let mut subjects: Vec<(Vec<Option<Option<f64>>>, f64)> = Vec::new();
    let mut index: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    let mut n_rows = 0;
    let mut n_token_missing = 0;
    let mut warnings = Vec::new();

    for (lineno, line) in text.lines().enumerate() {
        let line_1 = lineno + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < needed {
            return Err(HmmError::Parse {
                line: line_1,
                message: format!("expected at least {needed} columns, found {}", fields.len()),
            });
        }
        n_rows += 1;
        let id = fields[format.id_col].to_string();
        let week: f64 = fields[format.week_col]
            .parse()
            .map_err(|_| HmmError::Parse {
                line: line_1,
                message: format!("week `{}` is not a number", fields[format.week_col]),
            })?;
        if week.fract() != 0.0 || !WEEKS.contains(&(week as u32)) {
            return Err(HmmError::Parse {
                line: line_1,
                message: format!("week {week} outside the 0-6 grid"),
            });
        }
        let week = week as u32;
        let token = fields[format.response_col];
        let response: Option<f64> = if format.missing_tokens.iter().any(|t| t == token) {
            n_token_missing += 1;
            None
        } else {
            let y: f64 = token.parse().map_err(|_| HmmError::Parse {
                line: line_1,
                message: format!("response `{token}` is not a number or missing token"),
            })?;
            let (lo, hi) = format.response_range;
            if y < lo || y > hi {
                warnings.push(format!(
                    "line {line_1}: subject {id} week {week}: response {y} outside [{lo}, {hi}]"
                ));
            }
            Some(y)
        };
        let drug: f64 = fields[format.treatment_col]
            .parse()
            .map_err(|_| HmmError::Parse {
                line: line_1,
                message: format!(
                    "treatment `{}` is not a number",
                    fields[format.treatment_col]
                ),
            })?;

        let si = *index.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            subjects.push((vec![None; WEEKS.count()], drug));
            subjects.len() - 1
        });
        let (slots, first_drug) = &mut subjects[si];
        if *first_drug != drug {
            return Err(HmmError::InvalidData(format!(
                "subject {id} changes treatment from {first_drug} to {drug} at week {week}"
            )));
        }
        if slots[week as usize].is_some() {
            return Err(HmmError::DuplicateRecord {
                subject: id,
                time: week,
            });
        }
        slots[week as usize] = Some(response);
    }

    let schema = Schema::new(["week", "main", "drug"])?;
    let series = order
        .iter()
        .zip(&subjects)
        .map(|(id, (slots, drug))| {
            let records = WEEKS
                .map(|week| {
                    let covs = vec![week as f64, MAIN_WEEKS.contains(&week) as u8 as f64, *drug];
                    match slots[week as usize] {
                        Some(Some(y)) => Record::observed(week + 1, y, covs),
                        // Absent row and missing-token row both mean m = 1.
                        Some(None) | None => Record::missing(week + 1, covs),
                    }
                })
                .collect();
            TimeSeries::new(id.clone(), records)
        })
        .collect();
    Ok(LoadReport {
        dataset: Dataset::new(schema, series)?,
        n_rows,
        n_token_missing,
        warnings,
    })
}

/// Load a whitespace-delimited long-format file and expand it to the week
/// grid.
pub fn load_long(path: impl AsRef<Path>, format: &LongFormat) -> Result<LoadReport> {
    parse_long(&fs::read_to_string(path)?, format)
}

/// Per-week and per-subject missingness structure of a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingnessProfile {
    /// Fraction of series observed at each timepoint (index t-1, i.e. week
    /// for grid-expanded clinical data).
    pub observed_fraction: Vec<f64>,
    /// `count_histogram[c]` = number of series with exactly `c` observed
    /// records.
    pub count_histogram: Vec<usize>,
    /// Distinct values of the `drug` covariate (sorted) with per-timepoint
    /// observed fractions; empty when the dataset has no `drug` column.
    pub by_treatment: Vec<(f64, Vec<f64>)>,
}

impl MissingnessProfile {
    /// Fraction of series with at least `k` observed records.
    pub fn fraction_with_at_least(&self, k: usize) -> f64 {
        let total: usize = self.count_histogram.iter().sum();
        let hits: usize = self.count_histogram.iter().skip(k).sum();
        hits as f64 / total as f64
    }
}

/// Tabulate observed fractions per timepoint, per subject, and by
/// treatment group.
pub fn summarize_missingness(dataset: &Dataset) -> MissingnessProfile {
    let t_max = dataset.series().iter().map(|s| s.len()).max().unwrap_or(0);
    let mut observed = vec![0.0; t_max];
    let mut at_t = vec![0.0; t_max];
    let mut histogram = vec![0usize; t_max + 1];
    for s in dataset.series() {
        let mut count = 0;
        for (t0, rec) in s.records.iter().enumerate() {
            at_t[t0] += 1.0;
            if !rec.is_missing() {
                observed[t0] += 1.0;
                count += 1;
            }
        }
        histogram[count] += 1;
    }
    let observed_fraction: Vec<f64> = observed
        .iter()
        .zip(&at_t)
        .map(|(o, n)| if *n > 0.0 { o / n } else { 1.0 })
        .collect();

    let mut by_treatment = Vec::new();
    if let Some(drug_ix) = dataset.schema().index_of("drug") {
        let mut groups: Vec<f64> = dataset
            .series()
            .iter()
            .map(|s| s.records[0].covariates[drug_ix])
            .collect();
        groups.sort_by(|a, b| a.partial_cmp(b).unwrap());
        groups.dedup();
        for g in groups {
            let mut observed = vec![0.0; t_max];
            let mut at_t = vec![0.0; t_max];
            for s in dataset
                .series()
                .iter()
                .filter(|s| s.records[0].covariates[drug_ix] == g)
            {
                for (t0, rec) in s.records.iter().enumerate() {
                    at_t[t0] += 1.0;
                    if !rec.is_missing() {
                        observed[t0] += 1.0;
                    }
                }
            }
            let fractions = observed
                .iter()
                .zip(&at_t)
                .map(|(o, n)| if *n > 0.0 { o / n } else { 1.0 })
                .collect();
            by_treatment.push((g, fractions));
        }
    }
    MissingnessProfile {
        observed_fraction,
        count_histogram: histogram,
        by_treatment,
    }
}

/// One coefficient of the missingness GLM.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmRow {
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Fitted missingness GLM: a coefficient table plus solver flags.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit {
    pub rows: Vec<GlmRow>,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Quasi-separation: some coefficient ran to the solver cap, so its
    /// estimate and SE are not meaningful.
    pub separation: bool,
}

/// Logistic regression of the missingness indicator on an intercept plus
/// the named covariate terms. A term is either a covariate name from the
/// dataset schema or a `:`-joined interaction of names (the product of the
/// covariates). Standard errors come from the inverse Fisher information
/// at the fitted coefficients.
pub fn glm_missingness(dataset: &Dataset, terms: &[&str]) -> Result<GlmFit> {
    let schema = dataset.schema();
    let mut term_indices = Vec::with_capacity(terms.len());
    for term in terms {
        let mut indices = Vec::new();
        for name in term.split(':') {
            let name = name.trim();
            indices.push(
                schema
                    .index_of(name)
                    .ok_or_else(|| HmmError::CovariateNotFound(name.to_string()))?,
            );
        }
        term_indices.push(indices);
    }

    let n = dataset.n_records();
    let p = 1 + terms.len();
    let mut x = Vec::with_capacity(n * p);
    let mut y = Vec::with_capacity(n);
    for s in dataset.series() {
        for rec in &s.records {
            x.push(1.0);
            for indices in &term_indices {
                x.push(indices.iter().map(|&ix| rec.covariates[ix]).product());
            }
            y.push(rec.m() as f64);
        }
    }
    let w = vec![1.0; n];
    let fit = logistic_irls(&x, p, &y, &w, None, &SolverOptions::default())?;
    let cov = logistic_covariance(&x, p, &w, &fit.coefficients)?;

    let mut rows = Vec::with_capacity(p);
    for (j, term) in std::iter::once("(intercept)")
        .chain(terms.iter().copied())
        .enumerate()
    {
        let estimate = fit.coefficients[j];
        let se = cov[j * p + j].max(0.0).sqrt();
        let z = if se > 0.0 { estimate / se } else { f64::NAN };
        let p_value = if z.is_nan() {
            f64::NAN
        } else {
            2.0 * normal_cdf(-z.abs())
        };
        rows.push(GlmRow {
            term: term.to_string(),
            estimate,
            se,
            z,
            p_value,
        });
    }
    Ok(GlmFit {
        rows,
        log_likelihood: fit.log_likelihood,
        converged: fit.converged,
        separation: fit.separation,
    })
}

fn check_csv_safe(value: &str, what: &str) -> Result<()> {
    if value.contains(',') || value.contains('\n') || value.contains('\r') {
        return Err(HmmError::InvalidData(format!(
            "{what} `{value}` contains a comma or newline; not representable in this CSV layout"
        )));
    }
    Ok(())
}

/// Serialize any dataset as CSV with columns `id,t,y,m` followed by the
/// schema's covariates. `y` is empty exactly where `m` is 1. Floats use the
/// shortest round-trip representation, so loading the output reproduces the
/// dataset bit for bit.
pub fn dataset_to_csv(dataset: &Dataset) -> Result<String> {
    let mut out = String::from("id,t,y,m");
    for name in dataset.schema().names() {
        check_csv_safe(name, "covariate name")?;
        write!(out, ",{name}").unwrap();
    }
    out.push('\n');
    for s in dataset.series() {
        check_csv_safe(&s.id, "series id")?;
        for rec in &s.records {
            match rec.y() {
                Some(y) => write!(out, "{},{},{},0", s.id, rec.t, y).unwrap(),
                None => write!(out, "{},{},,1", s.id, rec.t).unwrap(),
            }
            for v in &rec.covariates {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn split_csv_line(line: &str) -> Vec<&str> {
    line.split(',').map(str::trim).collect()
}

/// Parse the generic CSV layout produced by [`dataset_to_csv`].
pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| HmmError::Parse {
        line: 1,
        message: "empty input".into(),
    })?;
    let cols = split_csv_line(header);
    if cols.len() < 4 || cols[..4] != ["id", "t", "y", "m"] {
        return Err(HmmError::Parse {
            line: 1,
            message: "expected header id,t,y,m,<covariates...>".into(),
        });
    }
    let schema = Schema::new(cols[4..].iter().copied())?;
    let n_cov = schema.len();

    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Vec<Record>> =
        std::collections::HashMap::new();
    for (lineno, line) in lines {
        let line_1 = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(line);
        if fields.len() != 4 + n_cov {
            return Err(HmmError::Parse {
                line: line_1,
                message: format!("expected {} fields, found {}", 4 + n_cov, fields.len()),
            });
        }
        let t: u32 = fields[1].parse().map_err(|_| HmmError::Parse {
            line: line_1,
            message: format!("t `{}` is not an integer", fields[1]),
        })?;
        let m = match fields[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(HmmError::Parse {
                    line: line_1,
                    message: format!("m `{other}` is not 0 or 1"),
                })
            }
        };
        let covs = fields[4..]
            .iter()
            .map(|f| {
                f.parse().map_err(|_| HmmError::Parse {
                    line: line_1,
                    message: format!("covariate `{f}` is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let record = if m {
            if !fields[2].is_empty() {
                return Err(HmmError::Parse {
                    line: line_1,
                    message: "missing record (m=1) carries a response".into(),
                });
            }
            Record::missing(t, covs)
        } else {
            let y: f64 = fields[2].parse().map_err(|_| HmmError::Parse {
                line: line_1,
                message: format!("response `{}` is not a number", fields[2]),
            })?;
            Record::observed(t, y, covs)
        };
        let id = fields[0].to_string();
        by_id
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(record);
    }
    let series = order
        .into_iter()
        .map(|id| {
            let records = by_id.remove(&id).unwrap();
            TimeSeries::new(id, records)
        })
        .collect();
    Dataset::new(schema, series)
}

/// Serialize a grid-expanded clinical dataset as CSV with columns
/// `id,week,imps79,missing,drug,main`. Requires the `week`, `main`, and
/// `drug` covariates.
pub fn clinical_to_csv(dataset: &Dataset) -> Result<String> {
    let schema = dataset.schema();
    let col = |name: &str| {
        schema
            .index_of(name)
            .ok_or_else(|| HmmError::CovariateNotFound(name.to_string()))
    };
    let week_ix = col("week")?;
    let main_ix = col("main")?;
    let drug_ix = col("drug")?;
    let mut out = String::from("id,week,imps79,missing,drug,main\n");
    for s in dataset.series() {
        check_csv_safe(&s.id, "series id")?;
        for rec in &s.records {
            let c = &rec.covariates;
            let y = rec.y().map_or(String::new(), |y| format!("{y}"));
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.id,
                c[week_ix],
                y,
                rec.m(),
                c[drug_ix],
                c[main_ix]
            )
            .unwrap();
        }
    }
    Ok(out)
}

/// Parse the clinical CSV layout produced by [`clinical_to_csv`] back into
/// the grid-expanded dataset (schema `week`, `main`, `drug`).
pub fn clinical_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| HmmError::Parse {
        line: 1,
        message: "empty input".into(),
    })?;
    if split_csv_line(header) != ["id", "week", "imps79", "missing", "drug", "main"] {
        return Err(HmmError::Parse {
            line: 1,
            message: "expected header id,week,imps79,missing,drug,main".into(),
        });
    }
    let schema = Schema::new(["week", "main", "drug"])?;
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Vec<Record>> =
        std::collections::HashMap::new();
    for (lineno, line) in lines {
        let line_1 = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_csv_line(line);
        if fields.len() != 6 {
            return Err(HmmError::Parse {
                line: line_1,
                message: format!("expected 6 fields, found {}", fields.len()),
            });
        }
        let parse_num = |f: &str, what: &str| -> Result<f64> {
            f.parse().map_err(|_| HmmError::Parse {
                line: line_1,
                message: format!("{what} `{f}` is not a number"),
            })
        };
        let week = parse_num(fields[1], "week")?;
        let drug = parse_num(fields[4], "drug")?;
        let main = parse_num(fields[5], "main")?;
        let covs = vec![week, main, drug];
        let t = week as u32 + 1;
        let record = match fields[3] {
            "0" => Record::observed(t, parse_num(fields[2], "response")?, covs),
            "1" => Record::missing(t, covs),
            other => {
                return Err(HmmError::Parse {
                    line: line_1,
                    message: format!("missing flag `{other}` is not 0 or 1"),
                })
            }
        };
        let id = fields[0].to_string();
        by_id
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(record);
    }
    let series = order
        .into_iter()
        .map(|id| TimeSeries::new(id.clone(), by_id.remove(&id).unwrap()))
        .collect();
    Dataset::new(schema, series)
}
