//! Self-describing fitted-model files.
//!
//! A fitted model is written as a TOML document carrying everything needed
//! to reconstruct the [`HmmModel`] and to interpret it without the fitting
//! session: the dataset schema it was fitted against, the covariate lists
//! of each submodel, every parameter value, the constraint the fit ran
//! under, and fit metadata (log-likelihood, AIC/BIC, convergence).
//!
//! Multinomial-logit blocks store one row per non-reference category
//! (state 1 is the reference with all-zero logits); each row is
//! `[intercept, coefficients of the named covariates...]`. Floats are
//! written with round-trip precision, so reloading a file reproduces the
//! fitted parameters bit-for-bit and an EM refit from it terminates at the
//! same log-likelihood.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hmm_mnar::model::{
    Dataset, GaussianEmission, HmmModel, MissingnessConstraint, MissingnessModel, MultinomialLogit,
};
use hmm_mnar::select::{aic, bic, count_parameters};
use hmm_mnar::FitResult;

pub const FORMAT_TAG: &str = "hmm-mnar-model";

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelFile {
    /// Format marker; always [`FORMAT_TAG`].
    pub format: String,
    pub model: ModelSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSection>,
}

/// Model shape and parameter values.
#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSection {
    pub n_states: usize,
    /// Covariate names of the dataset the model was fitted against, in
    /// schema order. Decoding datasets must carry (at least) the covariates
    /// the submodels reference.
    pub schema: Vec<String>,
    pub initial_covariates: Vec<String>,
    pub transition_covariates: Vec<String>,
    pub missingness_covariates: Vec<String>,
    /// `"ignorable"`, `"state-bernoulli"`, or `"state-logistic"`.
    pub missingness: String,
    /// `"none"` or `"equal-across-states"`.
    pub constraint: String,
    /// Per-state emission means and standard deviations (index = state - 1).
    pub emission_mean: Vec<f64>,
    pub emission_sd: Vec<f64>,
    /// Initial-distribution logits: `(n_states - 1)` rows of
    /// `[intercept, initial_covariates...]`; row r belongs to state r + 2.
    pub initial_logit: Vec<Vec<f64>>,
    /// Transition logits: one block per from-state, each shaped like
    /// `initial_logit` over the to-states.
    pub transition_logit: Vec<Vec<Vec<f64>>>,
    /// Per-state missingness rates (state-bernoulli only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_phi: Option<Vec<f64>>,
    /// Per-state logistic rows `[intercept, missingness_covariates...]`
    /// (state-logistic only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub missing_logit: Option<Vec<Vec<f64>>>,
}

/// Fit metadata. Informational except for `log_likelihood`, `nobs`, and
/// the counts, which model comparison reuses.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitSection {
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    /// Observation count the BIC penalty used (observed responses).
    pub nobs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub raw_parameters: usize,
    pub free_parameters: usize,
    pub warnings: Vec<String>,
}

fn logit_rows(logit: &MultinomialLogit) -> Vec<Vec<f64>> {
    let width = 1 + logit.n_covariates();
    logit
        .coefficients()
        .chunks(width)
        .map(|row| row.to_vec())
        .collect()
}

fn constraint_name(constraint: MissingnessConstraint) -> &'static str {
    match constraint {
        MissingnessConstraint::None => "none",
        MissingnessConstraint::EqualAcrossStates => "equal-across-states",
    }
}

pub fn parse_constraint(name: &str) -> Result<MissingnessConstraint> {
    match name {
        "none" => Ok(MissingnessConstraint::None),
        "equal-across-states" => Ok(MissingnessConstraint::EqualAcrossStates),
        other => bail!("unknown constraint `{other}` (expected `none` or `equal-across-states`)"),
    }
}

/// Assemble the document for a fitted model. `dataset` supplies the schema
/// and the observation count behind the information criteria.
pub fn from_fit(fit: &FitResult, dataset: &Dataset) -> ModelFile {
    let model = &fit.model;
    let (missingness, missing_phi, missing_logit) = match &model.missingness {
        MissingnessModel::Ignorable => ("ignorable", None, None),
        MissingnessModel::StateBernoulli { phi } => ("state-bernoulli", Some(phi.clone()), None),
        MissingnessModel::StateLogistic { coefficients } => {
            ("state-logistic", None, Some(coefficients.clone()))
        }
    };
    let counts = count_parameters(model, fit.constraint);
    let nobs = dataset.n_observed();
    ModelFile {
        format: FORMAT_TAG.into(),
        model: ModelSection {
            n_states: model.n_states,
            schema: dataset.schema().names().to_vec(),
            initial_covariates: model.initial_covariates.clone(),
            transition_covariates: model.transition_covariates.clone(),
            missingness_covariates: model.missingness_covariates.clone(),
            missingness: missingness.into(),
            constraint: constraint_name(fit.constraint).into(),
            emission_mean: model.emissions.iter().map(|e| e.mean).collect(),
            emission_sd: model.emissions.iter().map(|e| e.sd).collect(),
            initial_logit: logit_rows(&model.initial),
            transition_logit: model.transitions.iter().map(logit_rows).collect(),
            missing_phi,
            missing_logit,
        },
        fit: Some(FitSection {
            log_likelihood: fit.log_likelihood,
            aic: aic(fit.log_likelihood, fit.free_parameters),
            bic: bic(fit.log_likelihood, fit.free_parameters, nobs),
            nobs,
            converged: fit.converged,
            iterations: fit.iterations,
            raw_parameters: counts.raw,
            free_parameters: fit.free_parameters,
            warnings: fit.warnings.clone(),
        }),
    }
}

fn rebuild_logit(
    rows: &[Vec<f64>],
    k: usize,
    n_cov: usize,
    what: &str,
) -> Result<MultinomialLogit> {
    let width = 1 + n_cov;
    if rows.len() + 1 != k {
        bail!(
            "{what}: expected {} logit rows for {k} states, found {}",
            k - 1,
            rows.len()
        );
    }
    let mut flat = Vec::with_capacity(rows.len() * width);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != width {
            bail!(
                "{what}: row {} has {} entries, expected {width}",
                r + 1,
                row.len()
            );
        }
        flat.extend_from_slice(row);
    }
    Ok(MultinomialLogit::new(k, n_cov, flat)?)
}

/// Reconstruct the model and the constraint annotation from a document.
pub fn to_model(file: &ModelFile) -> Result<(HmmModel, MissingnessConstraint)> {
    if file.format != FORMAT_TAG {
        bail!("not a fitted-model file (format marker `{}`)", file.format);
    }
    let m = &file.model;
    let k = m.n_states;
    if m.emission_mean.len() != k || m.emission_sd.len() != k {
        bail!("emission parameter lists must have one entry per state");
    }
    let emissions: Vec<GaussianEmission> = m
        .emission_mean
        .iter()
        .zip(&m.emission_sd)
        .map(|(&mean, &sd)| GaussianEmission::new(mean, sd))
        .collect();
    let initial = rebuild_logit(&m.initial_logit, k, m.initial_covariates.len(), "initial")?;
    if m.transition_logit.len() != k {
        bail!(
            "expected {k} transition blocks, found {}",
            m.transition_logit.len()
        );
    }
    let transitions = m
        .transition_logit
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            rebuild_logit(
                rows,
                k,
                m.transition_covariates.len(),
                &format!("transition from state {}", i + 1),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let missingness = match m.missingness.as_str() {
        "ignorable" => MissingnessModel::Ignorable,
        "state-bernoulli" => MissingnessModel::StateBernoulli {
            phi: m
                .missing_phi
                .clone()
                .context("state-bernoulli missingness needs `missing_phi`")?,
        },
        "state-logistic" => MissingnessModel::StateLogistic {
            coefficients: m
                .missing_logit
                .clone()
                .context("state-logistic missingness needs `missing_logit`")?,
        },
        other => bail!("unknown missingness kind `{other}`"),
    };
    let model = HmmModel::new(
        k,
        initial,
        transitions,
        emissions,
        missingness,
        m.initial_covariates.clone(),
        m.transition_covariates.clone(),
        m.missingness_covariates.clone(),
    )?;
    let constraint = parse_constraint(&m.constraint)?;
    Ok((model, constraint))
}

pub fn write(path: &Path, file: &ModelFile) -> Result<()> {
    let body = toml::to_string(file).context("serializing fitted model")?;
    let text = format!(
        "# Fitted hidden Markov model (format `{FORMAT_TAG}`).\n\
         # Logit blocks: state 1 is the reference category; each row is\n\
         # [intercept, named covariates...] for states 2..K in order.\n{body}"
    );
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: ModelFile =
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(file)
}
