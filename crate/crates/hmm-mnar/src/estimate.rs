//! EM (Baum-Welch) estimation with missing data, including the MNAR
//! missingness submodels, plus multi-start fitting.
//!
//! The E-step is the scaled forward-backward pass from [`crate::inference`].
//! M-steps are exact for the Gaussian emissions, the Bernoulli missingness
//! rates, and covariate-free multinomials; covariate-dependent multinomials
//! and logistic missingness use warm-started damped Newton solvers, whose
//! monotone inner line search makes the whole procedure a generalized EM —
//! the observed-data log-likelihood never decreases (up to roundoff).
//!
//! Convergence is declared when the absolute log-likelihood change drops
//! below `tol` (default 1e-6 nats) *and* the iteration moved no parameter
//! by more than [`FIXED_POINT_TOL`]; the default iteration cap is 500.
//! The second condition matters on ridges: a starved state's transition
//! row can keep drifting long after the log-likelihood has flattened, and
//! a `converged` model is promised to be a fixed point of the EM update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;

use crate::error::{HmmError, Result};
use crate::glm::{logistic_irls, multinomial_newton, SolverOptions};
use crate::inference::{Posteriors, Scratch};
use crate::model::{
    clamp_prob, Dataset, GaussianEmission, HmmModel, MissingnessConstraint, MissingnessModel,
    MultinomialLogit, SIGMA_FLOOR,
};
use crate::select::count_parameters;

/// EM controls. The defaults are the toolkit-wide conventions; tests and the
/// CLI expose them rather than inventing their own.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Maximum EM iterations.
    pub max_iter: usize,
    /// Stop when |LL_new - LL_old| falls below this (absolute, in nats).
    pub tol: f64,
    /// Lower bound applied to fitted emission standard deviations.
    pub sigma_floor: f64,
    /// Optional equality constraint on the missingness submodel.
    pub constraint: MissingnessConstraint,
    /// Inner Newton/IRLS controls.
    pub solver: SolverOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iter: 500,
            tol: 1e-6,
            sigma_floor: SIGMA_FLOOR,
            constraint: MissingnessConstraint::None,
            solver: SolverOptions::default(),
        }
    }
}

/// Parameter-movement threshold under which an EM iteration counts as a
/// fixed point (sup norm over every mean, SD, logit coefficient, and
/// missingness parameter). Refitting a `converged` model therefore moves
/// no parameter by more than about this much.
pub const FIXED_POINT_TOL: f64 = 1e-7;

/// Sup-norm distance between the parameters of two structurally identical
/// models (same state count, covariate widths, and missingness family).
fn max_parameter_move(a: &HmmModel, b: &HmmModel) -> f64 {
    let mut worst = 0.0f64;
    let mut track = |x: f64, y: f64| worst = worst.max((x - y).abs());
    for (ea, eb) in a.emissions.iter().zip(&b.emissions) {
        track(ea.mean, eb.mean);
        track(ea.sd, eb.sd);
    }
    for (ca, cb) in a
        .initial
        .coefficients()
        .iter()
        .zip(b.initial.coefficients())
    {
        track(*ca, *cb);
    }
    for (ra, rb) in a.transitions.iter().zip(&b.transitions) {
        for (ca, cb) in ra.coefficients().iter().zip(rb.coefficients()) {
            track(*ca, *cb);
        }
    }
    match (&a.missingness, &b.missingness) {
        (MissingnessModel::Ignorable, MissingnessModel::Ignorable) => {}
        (
            MissingnessModel::StateBernoulli { phi: ra },
            MissingnessModel::StateBernoulli { phi: rb },
        ) => {
            for (x, y) in ra.iter().zip(rb) {
                track(*x, *y);
            }
        }
        (
            MissingnessModel::StateLogistic { coefficients: ca },
            MissingnessModel::StateLogistic { coefficients: cb },
        ) => {
            for (rowa, rowb) in ca.iter().zip(cb) {
                for (x, y) in rowa.iter().zip(rowb) {
                    track(*x, *y);
                }
            }
        }
        _ => return f64::INFINITY,
    }
    worst
}

/// E-step output: per-series posteriors plus the total log-likelihood of the
/// parameters that produced them.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    pub per_series: Vec<Posteriors>,
    pub log_likelihood: f64,
}

/// Run the E-step: forward-backward over every series.
pub fn e_step(model: &HmmModel, dataset: &Dataset) -> Result<SufficientStats> {
    let prep = model.prepare(dataset.schema())?;
    let mut scratch = Scratch::new();
    let mut per_series = Vec::with_capacity(dataset.n_series());
    let mut ll = 0.0;
    for s in dataset.series() {
        let post = prep.posteriors(s, &mut scratch)?;
        ll += post.log_likelihood;
        per_series.push(post);
    }
    Ok(SufficientStats {
        per_series,
        log_likelihood: ll,
    })
}

/// Weighted Gaussian M-step: per-state weighted mean and (maximum-likelihood,
/// weight-sum-normalized) standard deviation over the *observed* responses,
/// with the standard deviation floored at `sigma_floor`.
///
/// `weights[k]` aligns with `ys`; a state whose weights sum to (near) zero is
/// reported as degenerate.
pub fn m_step_gaussian(
    ys: &[f64],
    weights: &[Vec<f64>],
    sigma_floor: f64,
) -> Result<Vec<GaussianEmission>> {
    let mut out = Vec::with_capacity(weights.len());
    for (k, w) in weights.iter().enumerate() {
        assert_eq!(w.len(), ys.len(), "weight vector length mismatch");
        let total: f64 = w.iter().sum();
        if total < 1e-10 {
            return Err(HmmError::DegenerateState { state: k });
        }
        let mean = ys.iter().zip(w).map(|(y, wi)| wi * y).sum::<f64>() / total;
        let var = ys
            .iter()
            .zip(w)
            .map(|(y, wi)| wi * (y - mean) * (y - mean))
            .sum::<f64>()
            / total;
        out.push(GaussianEmission::new(mean, var.sqrt().max(sigma_floor)));
    }
    Ok(out)
}

/// Weighted Bernoulli M-step: per-state weighted proportion of missing
/// records, clamped away from 0 and 1.
pub fn m_step_bernoulli(missing: &[bool], weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(weights.len());
    for (k, w) in weights.iter().enumerate() {
        assert_eq!(w.len(), missing.len(), "weight vector length mismatch");
        let total: f64 = w.iter().sum();
        if total < 1e-10 {
            return Err(HmmError::DegenerateState { state: k });
        }
        let hits: f64 = missing
            .iter()
            .zip(w)
            .filter(|(m, _)| **m)
            .map(|(_, wi)| wi)
            .sum();
        out.push(clamp_prob(hits / total));
    }
    Ok(out)
}

/// Everything about a fit worth keeping.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: HmmModel,
    pub log_likelihood: f64,
    /// Log-likelihood after 0, 1, 2, ... M-steps (so `trace[0]` is the
    /// starting value and `trace.len() - 1 == iterations`).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub free_parameters: usize,
    /// The constraint the fit ran under (fixes which parameters are free).
    pub constraint: MissingnessConstraint,
    /// Human-readable notes: solver separation, failed starts, and similar.
    pub warnings: Vec<String>,
}

/// Design matrices and index maps that stay fixed across EM iterations.
struct DesignCache {
    /// Covariate columns for the initial-distribution logit (one row per
    /// series), with leading intercept. Empty when covariate-free.
    init_x: Vec<f64>,
    /// Covariate rows for transitions (one row per origin record, i.e. per
    /// series per step before the last), with intercept.
    trans_x: Vec<f64>,
    /// Covariate rows for the missingness logistic (one row per record).
    miss_x: Vec<f64>,
    /// Missingness indicator per record, as 0/1 targets.
    miss_y: Vec<f64>,
    n_trans_rows: usize,
}

impl DesignCache {
    fn build(model: &HmmModel, dataset: &Dataset) -> Result<Self> {
        let schema = dataset.schema();
        let init_ix = schema.resolve(&model.initial_covariates)?;
        let trans_ix = schema.resolve(&model.transition_covariates)?;
        let miss_ix = schema.resolve(&model.missingness_covariates)?;

        let mut init_x = Vec::new();
        if !init_ix.is_empty() {
            for s in dataset.series() {
                init_x.push(1.0);
                for &ix in &init_ix {
                    init_x.push(s.records[0].covariates[ix]);
                }
            }
        }
        let mut trans_x = Vec::new();
        let mut n_trans_rows = 0;
        for s in dataset.series() {
            n_trans_rows += s.len() - 1;
        }
        if !trans_ix.is_empty() {
            for s in dataset.series() {
                for rec in &s.records[..s.len() - 1] {
                    trans_x.push(1.0);
                    for &ix in &trans_ix {
                        trans_x.push(rec.covariates[ix]);
                    }
                }
            }
        }
        let mut miss_x = Vec::new();
        let mut miss_y = Vec::new();
        if matches!(model.missingness, MissingnessModel::StateLogistic { .. }) {
            for s in dataset.series() {
                for rec in &s.records {
                    miss_x.push(1.0);
                    for &ix in &miss_ix {
                        miss_x.push(rec.covariates[ix]);
                    }
                    miss_y.push(rec.m() as f64);
                }
            }
        }
        Ok(DesignCache {
            init_x,
            trans_x,
            miss_x,
            miss_y,
            n_trans_rows,
        })
    }
}

/// One full M-step: returns the updated model, pushing solver notes onto
/// `warnings`.
fn m_step(
    model: &HmmModel,
    dataset: &Dataset,
    stats: &SufficientStats,
    config: &FitConfig,
    cache: &DesignCache,
    warnings: &mut Vec<String>,
) -> Result<HmmModel> {
    let k = model.n_states;
    let series = dataset.series();

    // --- Gaussian emissions (observed records only) ---
    let mut emissions = Vec::with_capacity(k);
    for state in 0..k {
        let mut total = 0.0;
        let mut mean_acc = 0.0;
        for (si, s) in series.iter().enumerate() {
            let post = &stats.per_series[si];
            for (t, rec) in s.records.iter().enumerate() {
                if let Some(y) = rec.y() {
                    let g = post.gamma_at(t, state);
                    total += g;
                    mean_acc += g * y;
                }
            }
        }
        if total < 1e-10 {
            return Err(HmmError::DegenerateState { state });
        }
        let mean = mean_acc / total;
        let mut var_acc = 0.0;
        for (si, s) in series.iter().enumerate() {
            let post = &stats.per_series[si];
            for (t, rec) in s.records.iter().enumerate() {
                if let Some(y) = rec.y() {
                    var_acc += post.gamma_at(t, state) * (y - mean) * (y - mean);
                }
            }
        }
        emissions.push(GaussianEmission::new(
            mean,
            (var_acc / total).sqrt().max(config.sigma_floor),
        ));
    }

    // --- Initial distribution ---
    let n_init_cov = model.initial_covariates.len();
    let initial = if n_init_cov == 0 {
        let mut totals = vec![0.0; k];
        for post in &stats.per_series {
            for (state, tot) in totals.iter_mut().enumerate() {
                *tot += post.gamma_at(0, state);
            }
        }
        let n = dataset.n_series() as f64;
        totals.iter_mut().for_each(|t| *t /= n);
        MultinomialLogit::from_probs(&totals)?
    } else {
        let mut w = Vec::with_capacity(dataset.n_series() * k);
        for post in &stats.per_series {
            for state in 0..k {
                w.push(post.gamma_at(0, state));
            }
        }
        let fit = multinomial_newton(
            &cache.init_x,
            1 + n_init_cov,
            &w,
            k,
            Some(model.initial.coefficients()),
            &config.solver,
        )?;
        if fit.separation {
            warnings.push("initial-distribution logit hit the coefficient cap".into());
        }
        MultinomialLogit::new(k, n_init_cov, fit.coefficients)?
    };

    // --- Transitions, one multinomial per origin state ---
    let n_trans_cov = model.transition_covariates.len();
    let mut transitions = Vec::with_capacity(k);
    for origin in 0..k {
        if n_trans_cov == 0 {
            let mut num = vec![0.0; k];
            for post in &stats.per_series {
                for t in 0..post.n_steps - 1 {
                    for (dest, acc) in num.iter_mut().enumerate() {
                        *acc += post.xi_at(t, origin, dest);
                    }
                }
            }
            let denom: f64 = num.iter().sum();
            if denom < 1e-12 {
                // No expected visits to this origin before a final step
                // (length-1 series, or a state only reached at the end):
                // the transition term of the objective is empty, so any row
                // maximizes it — keep the current one.
                transitions.push(model.transitions[origin].clone());
                continue;
            }
            num.iter_mut().for_each(|v| *v /= denom);
            transitions.push(MultinomialLogit::from_probs(&num)?);
        } else {
            let mut w = Vec::with_capacity(cache.n_trans_rows * k);
            for post in &stats.per_series {
                for t in 0..post.n_steps - 1 {
                    for dest in 0..k {
                        w.push(post.xi_at(t, origin, dest));
                    }
                }
            }
            let fit = multinomial_newton(
                &cache.trans_x,
                1 + n_trans_cov,
                &w,
                k,
                Some(model.transitions[origin].coefficients()),
                &config.solver,
            )?;
            if fit.separation {
                warnings.push(format!(
                    "transition logit from state {} hit the coefficient cap",
                    origin + 1
                ));
            }
            transitions.push(MultinomialLogit::new(k, n_trans_cov, fit.coefficients)?);
        }
    }

    // --- Missingness submodel ---
    let missingness = match &model.missingness {
        MissingnessModel::Ignorable => MissingnessModel::Ignorable,
        MissingnessModel::StateBernoulli { .. } => {
            match config.constraint {
                MissingnessConstraint::None => {
                    let mut phi = Vec::with_capacity(k);
                    for state in 0..k {
                        let mut total = 0.0;
                        let mut hits = 0.0;
                        for (si, s) in series.iter().enumerate() {
                            let post = &stats.per_series[si];
                            for (t, rec) in s.records.iter().enumerate() {
                                let g = post.gamma_at(t, state);
                                total += g;
                                if rec.is_missing() {
                                    hits += g;
                                }
                            }
                        }
                        if total < 1e-10 {
                            return Err(HmmError::DegenerateState { state });
                        }
                        phi.push(clamp_prob(hits / total));
                    }
                    MissingnessModel::StateBernoulli { phi }
                }
                MissingnessConstraint::EqualAcrossStates => {
                    // Posterior weights sum to one per record, so the pooled
                    // rate is just the overall missing fraction.
                    let pooled =
                        clamp_prob(dataset.n_missing() as f64 / dataset.n_records() as f64);
                    MissingnessModel::StateBernoulli {
                        phi: vec![pooled; k],
                    }
                }
            }
        }
        MissingnessModel::StateLogistic { coefficients } => {
            let width = 1 + model.missingness_covariates.len();
            match config.constraint {
                MissingnessConstraint::None => {
                    let mut new_coefs = Vec::with_capacity(k);
                    let n_records = cache.miss_y.len();
                    let mut w = vec![0.0; n_records];
                    for state in 0..k {
                        let mut pos = 0;
                        for (si, s) in series.iter().enumerate() {
                            let post = &stats.per_series[si];
                            for t in 0..s.len() {
                                w[pos] = post.gamma_at(t, state);
                                pos += 1;
                            }
                        }
                        let fit = logistic_irls(
                            &cache.miss_x,
                            width,
                            &cache.miss_y,
                            &w,
                            Some(&coefficients[state]),
                            &config.solver,
                        )?;
                        if fit.separation {
                            warnings.push(format!(
                                "missingness logit for state {} hit the coefficient cap",
                                state + 1
                            ));
                        }
                        new_coefs.push(fit.coefficients);
                    }
                    MissingnessModel::StateLogistic {
                        coefficients: new_coefs,
                    }
                }
                MissingnessConstraint::EqualAcrossStates => {
                    // gamma sums to one across states, so the constrained
                    // M-step is one unweighted logistic regression.
                    let w = vec![1.0; cache.miss_y.len()];
                    let fit = logistic_irls(
                        &cache.miss_x,
                        width,
                        &cache.miss_y,
                        &w,
                        Some(&coefficients[0]),
                        &config.solver,
                    )?;
                    if fit.separation {
                        warnings.push("shared missingness logit hit the coefficient cap".into());
                    }
                    MissingnessModel::StateLogistic {
                        coefficients: vec![fit.coefficients; k],
                    }
                }
            }
        }
    };

    let mut next = model.clone();
    next.emissions = emissions;
    next.initial = initial;
    next.transitions = transitions;
    next.missingness = missingness;
    next.validate()?;
    Ok(next)
}

/// Fit by EM from the given starting parameters.
pub fn em_fit(model: &HmmModel, dataset: &Dataset, config: &FitConfig) -> Result<FitResult> {
    if config.constraint == MissingnessConstraint::EqualAcrossStates
        && model.missingness.is_ignorable()
    {
        return Err(HmmError::InvalidConstraint(
            "equal-across-states applies only to modeled missingness".into(),
        ));
    }
    let cache = DesignCache::build(model, dataset)?;
    let mut warnings = Vec::new();
    let mut current = model.clone();
    let mut stats = e_step(&current, dataset)?;
    let mut trace = vec![stats.log_likelihood];
    let mut converged = false;

    for _ in 0..config.max_iter {
        let next = m_step(&current, dataset, &stats, config, &cache, &mut warnings)?;
        let moved = max_parameter_move(&current, &next);
        let next_stats = e_step(&next, dataset)?;
        let delta = next_stats.log_likelihood - trace.last().unwrap();
        trace.push(next_stats.log_likelihood);
        current = next;
        stats = next_stats;
        if delta.abs() < config.tol && moved < FIXED_POINT_TOL {
            converged = true;
            break;
        }
    }
    warnings.dedup();
    Ok(FitResult {
        log_likelihood: *trace.last().unwrap(),
        iterations: trace.len() - 1,
        free_parameters: count_parameters(&current, config.constraint).free,
        constraint: config.constraint,
        model: current,
        trace,
        converged,
        warnings,
    })
}

/// Summary statistics of the observed responses, shared by all starts.
struct ObservedMoments {
    sorted: Vec<f64>,
    sd: f64,
    missing_rate: f64,
}

impl ObservedMoments {
    fn compute(dataset: &Dataset) -> Result<Self> {
        let mut sorted = dataset.observed_values();
        if sorted.is_empty() {
            return Err(HmmError::InvalidData(
                "dataset has no observed responses; nothing to anchor starting values".into(),
            ));
        }
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        Ok(ObservedMoments {
            sorted,
            sd: var.sqrt().max(SIGMA_FLOOR),
            missing_rate: dataset.n_missing() as f64 / dataset.n_records() as f64,
        })
    }

    /// Linear-interpolation quantile of the observed responses.
    fn quantile(&self, p: f64) -> f64 {
        let n = self.sorted.len();
        if n == 1 {
            return self.sorted[0];
        }
        let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        self.sorted[lo] * (1.0 - frac) + self.sorted[hi] * frac
    }
}

fn logit(p: f64) -> f64 {
    let p = clamp_prob(p);
    (p / (1.0 - p)).ln()
}

/// Deterministic moment-matched start: emission means at evenly spaced
/// observed quantiles, sigma at the overall SD, uniform initial/transition
/// distributions (zero covariate effects), missingness at the overall rate.
fn moment_start(template: &HmmModel, moments: &ObservedMoments) -> Result<HmmModel> {
    let k = template.n_states;
    let mut model = template.clone();
    for (i, e) in model.emissions.iter_mut().enumerate() {
        e.mean = moments.quantile((2 * i + 1) as f64 / (2 * k) as f64);
        e.sd = moments.sd;
    }
    model.initial = MultinomialLogit::new(
        k,
        template.initial_covariates.len(),
        vec![0.0; (k - 1) * (1 + template.initial_covariates.len())],
    )?;
    for row in model.transitions.iter_mut() {
        *row = MultinomialLogit::new(
            k,
            template.transition_covariates.len(),
            vec![0.0; (k - 1) * (1 + template.transition_covariates.len())],
        )?;
    }
    model.missingness = match &template.missingness {
        MissingnessModel::Ignorable => MissingnessModel::Ignorable,
        MissingnessModel::StateBernoulli { .. } => MissingnessModel::StateBernoulli {
            phi: vec![clamp_prob(moments.missing_rate); k],
        },
        MissingnessModel::StateLogistic { .. } => {
            let width = 1 + template.missingness_covariates.len();
            let mut row = vec![0.0; width];
            row[0] = logit(moments.missing_rate);
            MissingnessModel::StateLogistic {
                coefficients: vec![row; k],
            }
        }
    };
    model.validate()?;
    Ok(model)
}

/// Randomized start: jittered quantile means, Dirichlet(1, ..., 1) rows for
/// covariate-free simplexes, N(0, 0.5) draws for every logit coefficient.
fn random_start(
    template: &HmmModel,
    moments: &ObservedMoments,
    rng: &mut ChaCha8Rng,
) -> Result<HmmModel> {
    let k = template.n_states;
    let mut model = template.clone();
    for (i, e) in model.emissions.iter_mut().enumerate() {
        let jitter: f64 = StandardNormal.sample(rng);
        e.mean = moments.quantile((2 * i + 1) as f64 / (2 * k) as f64) + 0.5 * moments.sd * jitter;
        e.sd = moments.sd;
    }

    let dirichlet_row = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        draws.into_iter().map(|d| d / sum).collect()
    };
    let coef_block = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                0.5 * z
            })
            .collect()
    };

    model.initial = if template.initial_covariates.is_empty() {
        MultinomialLogit::from_probs(&dirichlet_row(rng, k))?
    } else {
        MultinomialLogit::new(
            k,
            template.initial_covariates.len(),
            coef_block(rng, (k - 1) * (1 + template.initial_covariates.len())),
        )?
    };
    for row in model.transitions.iter_mut() {
        *row = if template.transition_covariates.is_empty() {
            MultinomialLogit::from_probs(&dirichlet_row(rng, k))?
        } else {
            MultinomialLogit::new(
                k,
                template.transition_covariates.len(),
                coef_block(rng, (k - 1) * (1 + template.transition_covariates.len())),
            )?
        };
    }
    model.missingness = match &template.missingness {
        MissingnessModel::Ignorable => MissingnessModel::Ignorable,
        MissingnessModel::StateBernoulli { .. } => MissingnessModel::StateBernoulli {
            phi: (0..k).map(|_| clamp_prob(rng.gen::<f64>())).collect(),
        },
        MissingnessModel::StateLogistic { .. } => {
            let width = 1 + template.missingness_covariates.len();
            MissingnessModel::StateLogistic {
                coefficients: (0..k).map(|_| coef_block(rng, width)).collect(),
            }
        }
    };
    model.validate()?;
    Ok(model)
}

/// Fit from `n_starts` randomized initializations plus one moment-based
/// start, returning the best fit by log-likelihood (ties: earliest start).
///
/// Start `i` draws from an independent ChaCha stream `i` of `seed`, so the
/// result is identical for a given `(seed, n_starts)` no matter how many
/// threads run the starts.
pub fn multi_start_fit(
    template: &HmmModel,
    dataset: &Dataset,
    n_starts: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<FitResult> {
    if n_starts == 0 {
        return Err(HmmError::InvalidData(
            "multi-start needs n_starts >= 1".into(),
        ));
    }
    let moments = ObservedMoments::compute(dataset)?;
    let mut starts = Vec::with_capacity(n_starts + 1);
    starts.push(moment_start(template, &moments)?);
    for i in 0..n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        starts.push(random_start(template, &moments, &mut rng)?);
    }

    let fits: Vec<Result<FitResult>> = starts
        .par_iter()
        .map(|s| em_fit(s, dataset, config))
        .collect();

    let mut best: Option<(usize, FitResult)> = None;
    let mut failures = Vec::new();
    for (i, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok(f) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => f.log_likelihood > b.log_likelihood,
                };
                if better {
                    best = Some((i, f));
                }
            }
            Err(e) => failures.push(format!("start {i} failed: {e}")),
        }
    }
    match best {
        Some((_, mut f)) => {
            f.warnings.extend(failures);
            Ok(f)
        }
        None => Err(HmmError::AllStartsFailed {
            attempts: n_starts + 1,
            first: failures
                .first()
                .cloned()
                .unwrap_or_else(|| "no starts attempted".into()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::log_likelihood;
    use crate::model::{Record, Schema, TimeSeries};
    use crate::params::free_parameters;

    fn small_dataset() -> Dataset {
        // Two regimes around -1 and +1 with a few missing records.
        let ys: [&[Option<f64>]; 3] = [
            &[
                Some(-1.2),
                Some(-0.8),
                None,
                Some(0.9),
                Some(1.3),
                Some(1.1),
            ],
            &[Some(1.0), Some(0.8), Some(1.4), None, None, Some(-0.9)],
            &[
                Some(-1.1),
                None,
                Some(-0.7),
                Some(-1.3),
                Some(0.95),
                Some(1.2),
            ],
        ];
        let series = ys
            .iter()
            .enumerate()
            .map(|(i, vals)| {
                TimeSeries::new(
                    format!("s{i}"),
                    vals.iter()
                        .enumerate()
                        .map(|(t, v)| match v {
                            Some(y) => Record::observed(t as u32 + 1, *y, vec![]),
                            None => Record::missing(t as u32 + 1, vec![]),
                        })
                        .collect(),
                )
            })
            .collect();
        Dataset::new(Schema::empty(), series).unwrap()
    }

    fn two_state_start() -> HmmModel {
        HmmModel::homogeneous(
            &[0.5, 0.5],
            &[0.7, 0.3, 0.3, 0.7],
            vec![
                GaussianEmission::new(-0.5, 1.0),
                GaussianEmission::new(0.5, 1.0),
            ],
            MissingnessModel::StateBernoulli {
                phi: vec![0.2, 0.2],
            },
        )
        .unwrap()
    }

    #[test]
    fn gaussian_m_step_uniform_weights() {
        let ys = [1.0, 2.0, 3.0];
        let w = vec![vec![1.0; 3]];
        let fit = m_step_gaussian(&ys, &w, SIGMA_FLOOR).unwrap();
        assert!((fit[0].mean - 2.0).abs() < 1e-14);
        // ML variance divides by the weight sum: sqrt(2/3).
        assert!((fit[0].sd - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn gaussian_m_step_applies_sigma_floor() {
        let ys = [2.5, 2.5, 2.5];
        let w = vec![vec![1.0; 3]];
        let fit = m_step_gaussian(&ys, &w, SIGMA_FLOOR).unwrap();
        assert_eq!(fit[0].sd, SIGMA_FLOOR);
    }

    #[test]
    fn gaussian_m_step_rejects_empty_state() {
        let ys = [1.0, 2.0];
        let w = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
        match m_step_gaussian(&ys, &w, SIGMA_FLOOR) {
            Err(HmmError::DegenerateState { state: 1 }) => {}
            other => panic!("expected degenerate state 1, got {other:?}"),
        }
    }

    #[test]
    fn bernoulli_m_step_examples() {
        let m = [true, false, false, true];
        let w = vec![vec![1.0; 4]];
        let phi = m_step_bernoulli(&m, &w).unwrap();
        assert!((phi[0] - 0.5).abs() < 1e-14);
        // All-missing under weight: clamped below 1.
        let m = [true, true];
        let w = vec![vec![1.0, 1.0]];
        let phi = m_step_bernoulli(&m, &w).unwrap();
        assert!(phi[0] < 1.0 && phi[0] > 1.0 - 1e-9);
    }

    #[test]
    fn single_state_em_is_closed_form_in_one_step() {
        // K = 1: EM's first M-step lands exactly on the ML estimates.
        let data = small_dataset();
        let start = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(5.0, 3.0)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let fit = em_fit(&start, &data, &FitConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
        let obs = data.observed_values();
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let sd = (obs.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
        assert!((fit.model.emissions[0].mean - mean).abs() < 1e-12);
        assert!((fit.model.emissions[0].sd - sd).abs() < 1e-12);
    }

    #[test]
    fn em_trace_is_monotone_and_converges() {
        let data = small_dataset();
        let fit = em_fit(&two_state_start(), &data, &FitConfig::default()).unwrap();
        assert!(fit.converged, "did not converge: {fit:?}");
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "trace decreased: {} -> {}", w[0], w[1]);
        }
        assert_eq!(fit.iterations, fit.trace.len() - 1);
    }

    #[test]
    fn refit_from_solution_is_a_fixed_point() {
        let data = small_dataset();
        let fit = em_fit(&two_state_start(), &data, &FitConfig::default()).unwrap();
        let refit = em_fit(&fit.model, &data, &FitConfig::default()).unwrap();
        assert!(refit.converged);
        assert!(refit.iterations <= 2);
        let a = free_parameters(&fit.model, MissingnessConstraint::None);
        let b = free_parameters(&refit.model, MissingnessConstraint::None);
        for (pa, pb) in a.iter().zip(&b) {
            assert!(
                (pa.value - pb.value).abs() < 1e-4,
                "{} moved: {} -> {}",
                pa.name,
                pa.value,
                pb.value
            );
        }
    }

    #[test]
    fn constrained_bernoulli_fit_factorizes() {
        // With phi forced equal across states, the missingness factor
        // separates: LL(fit) = LL(same params, ignorable) + sum log p(m).
        let data = small_dataset();
        let config = FitConfig {
            constraint: MissingnessConstraint::EqualAcrossStates,
            ..FitConfig::default()
        };
        let fit = em_fit(&two_state_start(), &data, &config).unwrap();
        let phi = match &fit.model.missingness {
            MissingnessModel::StateBernoulli { phi } => phi.clone(),
            other => panic!("unexpected {other:?}"),
        };
        assert!(phi.windows(2).all(|w| w[0] == w[1]), "not equal: {phi:?}");

        let mut ignorable = fit.model.clone();
        ignorable.missingness = MissingnessModel::Ignorable;
        let ll_ign = log_likelihood(&ignorable, &data).unwrap();
        let n_m = data.n_missing() as f64;
        let n_o = data.n_observed() as f64;
        let bernoulli_ll = n_m * phi[0].ln() + n_o * (1.0 - phi[0]).ln();
        assert!(
            (fit.log_likelihood - (ll_ign + bernoulli_ll)).abs() < 1e-9,
            "{} vs {}",
            fit.log_likelihood,
            ll_ign + bernoulli_ll
        );
        // And the pooled rate is the overall missing fraction.
        assert!((phi[0] - n_m / (n_m + n_o)).abs() < 1e-12);
    }

    #[test]
    fn constraint_on_ignorable_model_is_rejected() {
        let data = small_dataset();
        let mut model = two_state_start();
        model.missingness = MissingnessModel::Ignorable;
        let config = FitConfig {
            constraint: MissingnessConstraint::EqualAcrossStates,
            ..FitConfig::default()
        };
        assert!(matches!(
            em_fit(&model, &data, &config),
            Err(HmmError::InvalidConstraint(_))
        ));
    }

    #[test]
    fn multi_start_is_deterministic() {
        let data = small_dataset();
        let t = two_state_start();
        let a = multi_start_fit(&t, &data, 3, 99, &FitConfig::default()).unwrap();
        let b = multi_start_fit(&t, &data, 3, 99, &FitConfig::default()).unwrap();
        assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
        assert_eq!(a.model, b.model);
        assert!(multi_start_fit(&t, &data, 0, 1, &FitConfig::default()).is_err());
    }

    #[test]
    fn label_permutation_equivariance() {
        // Fitting from a state-swapped start lands on the state-swapped
        // optimum: same likelihood, swapped parameters.
        let data = small_dataset();
        let start = two_state_start();
        let swapped = HmmModel::homogeneous(
            &[0.5, 0.5],
            &[0.7, 0.3, 0.3, 0.7],
            vec![
                GaussianEmission::new(0.5, 1.0),
                GaussianEmission::new(-0.5, 1.0),
            ],
            MissingnessModel::StateBernoulli {
                phi: vec![0.2, 0.2],
            },
        )
        .unwrap();
        swapped.validate().unwrap();
        let f1 = em_fit(&start, &data, &FitConfig::default()).unwrap();
        let f2 = em_fit(&swapped, &data, &FitConfig::default()).unwrap();
        assert!((f1.log_likelihood - f2.log_likelihood).abs() < 1e-6);
        assert!(
            (f1.model.emissions[0].mean - f2.model.emissions[1].mean).abs() < 1e-4,
            "{} vs {}",
            f1.model.emissions[0].mean,
            f2.model.emissions[1].mean
        );
    }
}
