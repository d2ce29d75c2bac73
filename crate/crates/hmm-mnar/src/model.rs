//! Model and data types: Gaussian-emission hidden Markov models whose
//! initial, transition, and missingness components may depend on covariates,
//! plus the panel-data containers they operate on.
//!
//! Missing responses are first-class: a record either carries an observed
//! response or it doesn't, and the missingness indicator is *defined* as the
//! absence of the response, so the two can never disagree.

use crate::error::{HmmError, Result};

/// Probabilities produced or consumed by the estimation machinery are kept
/// inside `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log or logit.
pub const PROB_CLAMP: f64 = 1e-12;

/// Smallest emission standard deviation the M-step will produce. Keeps a
/// state that momentarily captures a single point from collapsing the
/// likelihood to a spike.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Largest coefficient magnitude the logistic/multinomial solvers will emit.
/// Reaching it signals (quasi-)separation.
pub const COEF_CAP: f64 = 30.0;

pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Ordered, unique covariate names for a dataset. Models reference covariates
/// by name; binding resolves names to column positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    names: Vec<String>,
}

impl Schema {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(HmmError::InvalidData(format!(
                    "duplicate covariate name `{n}` in schema"
                )));
            }
        }
        Ok(Schema { names })
    }

    pub fn empty() -> Self {
        Schema { names: Vec::new() }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Resolve a list of names to column indices, failing on the first name
    /// the schema does not carry.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.index_of(n)
                    .ok_or_else(|| HmmError::CovariateNotFound(n.clone()))
            })
            .collect()
    }
}

/// One time point of one series: a time index, an optional response, and the
/// covariate row (aligned with the dataset [`Schema`]).
///
/// The missingness indicator is derived, not stored: `m = 1` exactly when the
/// response is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub t: u32,
    y: Option<f64>,
    pub covariates: Vec<f64>,
}

impl Record {
    /// A record with an observed response.
    pub fn observed(t: u32, y: f64, covariates: Vec<f64>) -> Self {
        Record {
            t,
            y: Some(y),
            covariates,
        }
    }

    /// A record whose response is missing (`m = 1`).
    pub fn missing(t: u32, covariates: Vec<f64>) -> Self {
        Record {
            t,
            y: None,
            covariates,
        }
    }

    pub fn y(&self) -> Option<f64> {
        self.y
    }

    pub fn is_missing(&self) -> bool {
        self.y.is_none()
    }

    /// The missingness indicator as the usual 0/1 coding.
    pub fn m(&self) -> u8 {
        self.is_missing() as u8
    }
}

/// One subject's consecutive records.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub id: String,
    pub records: Vec<Record>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, records: Vec<Record>) -> Self {
        TimeSeries {
            id: id.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A validated panel: a covariate schema plus one or more time series.
///
/// Construction enforces the invariants the numerics rely on: series are
/// non-empty with time indices starting at >= 1 and increasing by exactly 1,
/// ids are unique, every covariate row matches the schema width, and all
/// stored numbers are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    series: Vec<TimeSeries>,
}

impl Dataset {
    pub fn new(schema: Schema, series: Vec<TimeSeries>) -> Result<Self> {
        if series.is_empty() {
            return Err(HmmError::InvalidData("dataset has no series".into()));
        }
        for (i, s) in series.iter().enumerate() {
            if s.records.is_empty() {
                return Err(HmmError::InvalidData(format!(
                    "series `{}` has no records",
                    s.id
                )));
            }
            if series[..i].iter().any(|prev| prev.id == s.id) {
                return Err(HmmError::InvalidData(format!(
                    "duplicate series id `{}`",
                    s.id
                )));
            }
            if s.records[0].t < 1 {
                return Err(HmmError::InvalidData(format!(
                    "series `{}` starts at t = {}; time indices start at 1",
                    s.id, s.records[0].t
                )));
            }
            for (j, r) in s.records.iter().enumerate() {
                if j > 0 && r.t != s.records[j - 1].t + 1 {
                    return Err(HmmError::InvalidData(format!(
                        "series `{}` jumps from t = {} to t = {}; use an explicit \
                         missing record for gaps",
                        s.id,
                        s.records[j - 1].t,
                        r.t
                    )));
                }
                if let Some(y) = r.y {
                    if !y.is_finite() {
                        return Err(HmmError::InvalidData(format!(
                            "series `{}` t = {}: non-finite response",
                            s.id, r.t
                        )));
                    }
                }
                if r.covariates.len() != schema.len() {
                    return Err(HmmError::InvalidData(format!(
                        "series `{}` t = {}: {} covariates, schema has {}",
                        s.id,
                        r.t,
                        r.covariates.len(),
                        schema.len()
                    )));
                }
                if r.covariates.iter().any(|v| !v.is_finite()) {
                    return Err(HmmError::InvalidData(format!(
                        "series `{}` t = {}: non-finite covariate",
                        s.id, r.t
                    )));
                }
            }
        }
        Ok(Dataset { schema, series })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn series(&self) -> &[TimeSeries] {
        &self.series
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    pub fn n_records(&self) -> usize {
        self.series.iter().map(|s| s.records.len()).sum()
    }

    /// Number of records with an observed response (`m = 0`).
    pub fn n_observed(&self) -> usize {
        self.n_records() - self.n_missing()
    }

    /// Number of records whose response is missing (`m = 1`).
    pub fn n_missing(&self) -> usize {
        self.series
            .iter()
            .map(|s| s.records.iter().filter(|r| r.is_missing()).count())
            .sum()
    }

    /// All observed responses, in series order.
    pub fn observed_values(&self) -> Vec<f64> {
        self.series
            .iter()
            .flat_map(|s| s.records.iter().filter_map(|r| r.y()))
            .collect()
    }
}

/// Gaussian emission for one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianEmission {
    pub mean: f64,
    pub sd: f64,
}

impl GaussianEmission {
    pub fn new(mean: f64, sd: f64) -> Self {
        GaussianEmission { mean, sd }
    }

    /// Density value at `y`.
    pub fn density(&self, y: f64) -> f64 {
        let z = (y - self.mean) / self.sd;
        (-0.5 * z * z).exp() / (self.sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Log density at `y`.
    pub fn ln_density(&self, y: f64) -> f64 {
        let z = (y - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Multinomial-logit map from a covariate row to a probability vector.
///
/// Category 0 is the reference: its logit is fixed at zero, and each other
/// category carries `1 + n_covariates` coefficients (intercept first). With
/// zero covariates this is just a reparameterized probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialLogit {
    n_categories: usize,
    n_covariates: usize,
    /// `(n_categories - 1) x (1 + n_covariates)`, row-major; row `r` holds the
    /// coefficients of category `r + 1`.
    coefficients: Vec<f64>,
}

impl MultinomialLogit {
    pub fn new(n_categories: usize, n_covariates: usize, coefficients: Vec<f64>) -> Result<Self> {
        if n_categories == 0 {
            return Err(HmmError::InvalidModel(
                "multinomial logit needs at least one category".into(),
            ));
        }
        let expect = (n_categories - 1) * (1 + n_covariates);
        if coefficients.len() != expect {
            return Err(HmmError::InvalidModel(format!(
                "multinomial logit with {n_categories} categories and {n_covariates} \
                 covariates needs {expect} coefficients, got {}",
                coefficients.len()
            )));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(HmmError::InvalidModel(
                "non-finite multinomial-logit coefficient".into(),
            ));
        }
        Ok(MultinomialLogit {
            n_categories,
            n_covariates,
            coefficients,
        })
    }

    /// Covariate-free logit whose probabilities reproduce `probs` (after
    /// clamping away exact zeros).
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(HmmError::InvalidModel("empty probability vector".into()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(HmmError::InvalidModel(format!(
                "probability vector {probs:?} is not a simplex"
            )));
        }
        let base = clamp_prob(probs[0]).ln();
        let coefficients = probs[1..]
            .iter()
            .map(|&p| clamp_prob(p).ln() - base)
            .collect();
        Ok(MultinomialLogit {
            n_categories: probs.len(),
            n_covariates: 0,
            coefficients,
        })
    }

    /// Covariate-free uniform distribution over `n_categories`.
    pub fn uniform(n_categories: usize) -> Self {
        MultinomialLogit {
            n_categories,
            n_covariates: 0,
            coefficients: vec![0.0; n_categories.saturating_sub(1)],
        }
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// Coefficient for `category` (>= 1; category 0 is the fixed reference)
    /// and column `j`, where column 0 is the intercept.
    pub fn coefficient(&self, category: usize, j: usize) -> f64 {
        debug_assert!(category >= 1 && category < self.n_categories);
        self.coefficients[(category - 1) * (1 + self.n_covariates) + j]
    }

    /// Softmax probabilities for a gathered covariate row (`covs.len()` must
    /// equal `n_covariates`). `out` must have length `n_categories`.
    ///
    /// The output is a simplex by construction: nonnegative entries summing
    /// to 1 up to rounding.
    pub fn probs_into(&self, covs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(covs.len(), self.n_covariates);
        debug_assert_eq!(out.len(), self.n_categories);
        let width = 1 + self.n_covariates;
        out[0] = 0.0;
        let mut max = 0.0f64;
        for k in 1..self.n_categories {
            let row = &self.coefficients[(k - 1) * width..k * width];
            let mut eta = row[0];
            for (j, &x) in covs.iter().enumerate() {
                eta += row[j + 1] * x;
            }
            out[k] = eta;
            if eta > max {
                max = eta;
            }
        }
        let mut sum = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
    }

    pub fn probs(&self, covs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_categories];
        self.probs_into(covs, &mut out);
        out
    }
}

/// How the missingness indicator is modeled.
#[derive(Debug, Clone, PartialEq)]
pub enum MissingnessModel {
    /// Missingness carries no information about the state; missing records
    /// contribute emission weight 1 and the indicator itself is not modeled.
    Ignorable,
    /// `p(m = 1 | state k) = phi[k]`: a per-state Bernoulli rate.
    StateBernoulli { phi: Vec<f64> },
    /// `p(m = 1 | state k, x) = logistic(coef[k] . [1, x])`: a per-state
    /// logistic regression on covariates, intercept first. All states share
    /// one covariate list (the model's `missingness_covariates`).
    StateLogistic { coefficients: Vec<Vec<f64>> },
}

impl MissingnessModel {
    pub fn kind(&self) -> &'static str {
        match self {
            MissingnessModel::Ignorable => "ignorable",
            MissingnessModel::StateBernoulli { .. } => "state-bernoulli",
            MissingnessModel::StateLogistic { .. } => "state-logistic",
        }
    }

    pub fn is_ignorable(&self) -> bool {
        matches!(self, MissingnessModel::Ignorable)
    }
}

/// Optional equality constraint used by fitting and parameter counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingnessConstraint {
    /// Each state keeps its own missingness parameters.
    #[default]
    None,
    /// All states share one set of missingness parameters. Under this
    /// constraint the missingness factor separates from the likelihood, so
    /// the model is an explicitly-modeled MAR mechanism.
    EqualAcrossStates,
}

/// A hidden Markov model with Gaussian emissions and (optionally)
/// covariate-dependent initial distribution, transitions, and missingness.
///
/// Covariates are referenced by name and resolved against a dataset's
/// [`Schema`] when the model is evaluated. Transition rows are indexed by the
/// *origin* state and use the covariates of the origin record.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    pub n_states: usize,
    /// Initial state distribution (categories = states).
    pub initial: MultinomialLogit,
    /// One multinomial logit per origin state.
    pub transitions: Vec<MultinomialLogit>,
    pub emissions: Vec<GaussianEmission>,
    pub missingness: MissingnessModel,
    pub initial_covariates: Vec<String>,
    pub transition_covariates: Vec<String>,
    pub missingness_covariates: Vec<String>,
}

impl HmmModel {
    /// Full constructor; validates shape consistency once, up front.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        initial: MultinomialLogit,
        transitions: Vec<MultinomialLogit>,
        emissions: Vec<GaussianEmission>,
        missingness: MissingnessModel,
        initial_covariates: Vec<String>,
        transition_covariates: Vec<String>,
        missingness_covariates: Vec<String>,
    ) -> Result<Self> {
        let model = HmmModel {
            n_states,
            initial,
            transitions,
            emissions,
            missingness,
            initial_covariates,
            transition_covariates,
            missingness_covariates,
        };
        model.validate()?;
        Ok(model)
    }

    /// Covariate-free model specified directly on the probability scale.
    /// `transition` is K x K row-major, rows indexed by origin state.
    pub fn homogeneous(
        initial: &[f64],
        transition: &[f64],
        emissions: Vec<GaussianEmission>,
        missingness: MissingnessModel,
    ) -> Result<Self> {
        let k = initial.len();
        if transition.len() != k * k {
            return Err(HmmError::InvalidModel(format!(
                "transition matrix has {} entries, expected {k}x{k}",
                transition.len()
            )));
        }
        let transitions = (0..k)
            .map(|i| MultinomialLogit::from_probs(&transition[i * k..(i + 1) * k]))
            .collect::<Result<Vec<_>>>()?;
        HmmModel::new(
            k,
            MultinomialLogit::from_probs(initial)?,
            transitions,
            emissions,
            missingness,
            Vec::new(),
            Vec::new(),
            Vec::new(),
        )
    }

    /// Re-check every structural invariant. Cheap; called whenever a model is
    /// bound to data.
    pub fn validate(&self) -> Result<()> {
        let k = self.n_states;
        if k == 0 {
            return Err(HmmError::InvalidModel(
                "model needs at least one state".into(),
            ));
        }
        if self.emissions.len() != k {
            return Err(HmmError::InvalidModel(format!(
                "{} emissions for {k} states",
                self.emissions.len()
            )));
        }
        for (i, e) in self.emissions.iter().enumerate() {
            if !e.mean.is_finite() || !e.sd.is_finite() || e.sd <= 0.0 {
                return Err(HmmError::InvalidModel(format!(
                    "state {} emission (mean {}, sd {}) is invalid",
                    i + 1,
                    e.mean,
                    e.sd
                )));
            }
        }
        if self.initial.n_categories() != k {
            return Err(HmmError::InvalidModel(
                "initial distribution category count != n_states".into(),
            ));
        }
        if self.initial.n_covariates() != self.initial_covariates.len() {
            return Err(HmmError::InvalidModel(
                "initial covariate count disagrees with its name list".into(),
            ));
        }
        if self.transitions.len() != k {
            return Err(HmmError::InvalidModel(format!(
                "{} transition rows for {k} states",
                self.transitions.len()
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.n_categories() != k {
                return Err(HmmError::InvalidModel(format!(
                    "transition row {} category count != n_states",
                    i + 1
                )));
            }
            if row.n_covariates() != self.transition_covariates.len() {
                return Err(HmmError::InvalidModel(format!(
                    "transition row {} covariate count disagrees with its name list",
                    i + 1
                )));
            }
        }
        match &self.missingness {
            MissingnessModel::Ignorable => {
                if !self.missingness_covariates.is_empty() {
                    return Err(HmmError::InvalidModel(
                        "ignorable missingness takes no covariates".into(),
                    ));
                }
            }
            MissingnessModel::StateBernoulli { phi } => {
                if !self.missingness_covariates.is_empty() {
                    return Err(HmmError::InvalidModel(
                        "state-Bernoulli missingness takes no covariates".into(),
                    ));
                }
                if phi.len() != k {
                    return Err(HmmError::InvalidModel(format!(
                        "{} missingness rates for {k} states",
                        phi.len()
                    )));
                }
                if phi.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                    return Err(HmmError::InvalidModel(
                        "missingness rate outside [0, 1]".into(),
                    ));
                }
            }
            MissingnessModel::StateLogistic { coefficients } => {
                if coefficients.len() != k {
                    return Err(HmmError::InvalidModel(format!(
                        "{} missingness coefficient rows for {k} states",
                        coefficients.len()
                    )));
                }
                let width = 1 + self.missingness_covariates.len();
                for (i, row) in coefficients.iter().enumerate() {
                    if row.len() != width {
                        return Err(HmmError::InvalidModel(format!(
                            "state {} missingness row has {} coefficients, expected {width}",
                            i + 1,
                            row.len()
                        )));
                    }
                    if row.iter().any(|c| !c.is_finite()) {
                        return Err(HmmError::InvalidModel(
                            "non-finite missingness coefficient".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
