//! Model comparison and uncertainty: parameter counting, AIC/BIC,
//! likelihood-ratio tests, across-state equality constraints, and Wald
//! confidence intervals from a finite-difference Hessian.
//!
//! Two parameter counts coexist. The *raw* count includes one coefficient
//! vector per multinomial category — the convention many HMM packages
//! report as "#par" — while the *free* count drops the reference-category
//! vectors that are fixed at zero and are not identified. Information
//! criteria use the free count; both are carried so reports can show
//! either.

use rayon::prelude::*;

use crate::error::{HmmError, Result};
use crate::estimate::{FitConfig, FitResult};
use crate::inference::log_likelihood;
use crate::linalg::invert;
use crate::model::{Dataset, HmmModel, MissingnessConstraint, MissingnessModel, SIGMA_FLOOR};
use crate::params::{free_parameters, set_free_parameters};
use crate::special::{chi_square_tail, normal_quantile};

/// Raw and free (identifiable) parameter counts for one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterCount {
    pub raw: usize,
    pub free: usize,
}

/// Count parameters under an optional across-state equality constraint on
/// the missingness submodel.
pub fn count_parameters(model: &HmmModel, constraint: MissingnessConstraint) -> ParameterCount {
    let k = model.n_states;
    let init_w = 1 + model.initial_covariates.len();
    let trans_w = 1 + model.transition_covariates.len();
    let miss_sets = match constraint {
        MissingnessConstraint::None => k,
        MissingnessConstraint::EqualAcrossStates => 1,
    };
    let miss = match &model.missingness {
        MissingnessModel::Ignorable => 0,
        MissingnessModel::StateBernoulli { .. } => miss_sets,
        MissingnessModel::StateLogistic { .. } => {
            miss_sets * (1 + model.missingness_covariates.len())
        }
    };
    ParameterCount {
        raw: 2 * k + k * init_w + k * k * trans_w + miss,
        free: 2 * k + (k - 1) * init_w + k * (k - 1) * trans_w + miss,
    }
}

/// Identifiable parameter count with no constraint.
pub fn count_free_parameters(model: &HmmModel) -> usize {
    count_parameters(model, MissingnessConstraint::None).free
}

pub fn aic(log_likelihood: f64, free_count: usize) -> f64 {
    -2.0 * log_likelihood + 2.0 * free_count as f64
}

pub fn bic(log_likelihood: f64, free_count: usize, nobs: usize) -> f64 {
    assert!(nobs >= 1, "BIC needs at least one observation");
    -2.0 * log_likelihood + (nobs as f64).ln() * free_count as f64
}

/// One line of a model-comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub n_states: usize,
    pub log_likelihood: f64,
    pub raw_parameters: usize,
    pub free_parameters: usize,
    pub aic: f64,
    pub bic: f64,
}

/// Build comparison rows for labeled fits, in the given order. `nobs`
/// should be the number of non-missing response records (the convention
/// that reproduces standard report tables).
pub fn compare_models(fits: &[(String, &FitResult)], nobs: usize) -> Vec<ComparisonRow> {
    fits.iter()
        .map(|(label, fit)| {
            let counts = count_parameters(&fit.model, fit.constraint);
            ComparisonRow {
                label: label.clone(),
                n_states: fit.model.n_states,
                log_likelihood: fit.log_likelihood,
                raw_parameters: counts.raw,
                free_parameters: counts.free,
                aic: aic(fit.log_likelihood, counts.free),
                bic: bic(fit.log_likelihood, counts.free, nobs),
            }
        })
        .collect()
}

/// Index of the row with the smallest BIC.
pub fn best_by_bic(rows: &[ComparisonRow]) -> Option<usize> {
    rows.iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.bic.partial_cmp(&b.bic).unwrap())
        .map(|(i, _)| i)
}

/// CSV serialization of a comparison table.
pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out =
        String::from("label,n_states,log_likelihood,raw_parameters,free_parameters,aic,bic\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.n_states,
            r.log_likelihood,
            r.raw_parameters,
            r.free_parameters,
            r.aic,
            r.bic
        ));
    }
    out
}

/// Likelihood-ratio test of nested fits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrtResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Upper-tail chi-square test of `2 (ll_full - ll_restricted)` on `df`
/// degrees of freedom. A slightly negative statistic (within 1e-6, from
/// convergence tolerance) is clamped to zero; anything more negative means
/// the models were not actually nested or the full fit did not converge.
pub fn likelihood_ratio_test(ll_full: f64, ll_restricted: f64, df: usize) -> Result<LrtResult> {
    if df == 0 {
        return Err(HmmError::InvalidData(
            "likelihood-ratio test needs df >= 1".into(),
        ));
    }
    let statistic = 2.0 * (ll_full - ll_restricted);
    if statistic < -1e-6 {
        return Err(HmmError::NestingViolation(format!(
            "full model log-likelihood {ll_full} is below the restricted model's {ll_restricted}"
        )));
    }
    let statistic = statistic.max(0.0);
    Ok(LrtResult {
        statistic,
        df,
        p_value: chi_square_tail(statistic, df),
    })
}

/// Produce the constrained counterpart of a fit setup: the model's
/// missingness parameters are replaced by their across-state average (a
/// feasible starting point satisfying the constraint) and the config gains
/// the equality constraint.
pub fn constrain_missingness_equal(
    model: &HmmModel,
    config: &FitConfig,
) -> Result<(HmmModel, FitConfig)> {
    let k = model.n_states;
    let mut constrained = model.clone();
    constrained.missingness = match &model.missingness {
        MissingnessModel::Ignorable => {
            return Err(HmmError::InvalidConstraint(
                "equal-across-states applies only to modeled missingness".into(),
            ));
        }
        MissingnessModel::StateBernoulli { phi } => {
            let mean = phi.iter().sum::<f64>() / k as f64;
            MissingnessModel::StateBernoulli { phi: vec![mean; k] }
        }
        MissingnessModel::StateLogistic { coefficients } => {
            let width = coefficients[0].len();
            let mut mean = vec![0.0; width];
            for row in coefficients {
                for (m, c) in mean.iter_mut().zip(row) {
                    *m += c / k as f64;
                }
            }
            MissingnessModel::StateLogistic {
                coefficients: vec![mean; k],
            }
        }
    };
    let mut cfg = config.clone();
    cfg.constraint = MissingnessConstraint::EqualAcrossStates;
    Ok((constrained, cfg))
}

/// Wald interval for one parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaldInterval {
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
}

/// One confidence-interval row; `interval` is `None` when the estimate sits
/// at a boundary of the parameter space, where Wald theory does not apply.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRow {
    pub parameter: String,
    pub estimate: f64,
    pub interval: Option<WaldInterval>,
}

/// Probabilities this close to 0 or 1 (and rates, via their logits) are
/// treated as boundary estimates rather than interior points.
const BOUNDARY_PROB_MARGIN: f64 = 2.5e-4;
/// A logit-scale coefficient beyond this magnitude encodes a probability
/// within ~3e-12 of 0 or 1, i.e. a boundary estimate.
const BOUNDARY_LOGIT: f64 = 26.5;

fn at_boundary(name: &str, value: f64) -> bool {
    if name.starts_with("mu[") {
        false
    } else if name.starts_with("sigma[") {
        value <= SIGMA_FLOOR * (1.0 + 1e-6)
    } else if name.starts_with("phi") {
        value <= BOUNDARY_PROB_MARGIN || value >= 1.0 - BOUNDARY_PROB_MARGIN
    } else {
        value.abs() >= BOUNDARY_LOGIT
    }
}

/// Wald confidence intervals at the given level from a central-difference
/// Hessian of the observed-data log-likelihood at the fitted parameters.
///
/// Boundary estimates are excluded from the Hessian and flagged (interval
/// `None`). A singular observed information matrix is an error naming the
/// offending parameter.
pub fn approx_confidence_intervals(
    fit: &FitResult,
    dataset: &Dataset,
    level: f64,
) -> Result<Vec<IntervalRow>> {
    if !(0.0 < level && level < 1.0) {
        return Err(HmmError::InvalidData(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let params = free_parameters(&fit.model, fit.constraint);
    let theta: Vec<f64> = params.iter().map(|p| p.value).collect();
    let kept: Vec<usize> = params
        .iter()
        .enumerate()
        .filter(|(_, p)| !at_boundary(&p.name, p.value))
        .map(|(i, _)| i)
        .collect();
    let n = kept.len();

    let eval = |values: &[f64]| -> Result<f64> {
        let model = set_free_parameters(&fit.model, fit.constraint, values)?;
        log_likelihood(&model, dataset)
    };
    let step = |i: usize| 1e-4 * theta[i].abs().max(1.0);

    // Entries of the upper triangle, evaluated independently.
    let mut jobs = Vec::with_capacity(n * (n + 1) / 2);
    for a in 0..n {
        for b in a..n {
            jobs.push((a, b));
        }
    }
    let f0 = eval(&theta)?;
    let entries: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(a, b)| -> Result<f64> {
            let (i, j) = (kept[a], kept[b]);
            let (hi, hj) = (step(i), step(j));
            let mut x = theta.clone();
            if a == b {
                x[i] = theta[i] + hi;
                let fp = eval(&x)?;
                x[i] = theta[i] - hi;
                let fm = eval(&x)?;
                Ok((fp - 2.0 * f0 + fm) / (hi * hi))
            } else {
                x[i] = theta[i] + hi;
                x[j] = theta[j] + hj;
                let fpp = eval(&x)?;
                x[j] = theta[j] - hj;
                let fpm = eval(&x)?;
                x[i] = theta[i] - hi;
                x[j] = theta[j] + hj;
                let fmp = eval(&x)?;
                x[j] = theta[j] - hj;
                let fmm = eval(&x)?;
                Ok((fpp - fpm - fmp + fmm) / (4.0 * hi * hj))
            }
        })
        .collect();

    // Observed information = negative Hessian.
    let mut info = vec![0.0; n * n];
    for ((a, b), entry) in jobs.into_iter().zip(entries) {
        let h = entry?;
        info[a * n + b] = -h;
        info[b * n + a] = -h;
    }
    let cov = invert(&info, n).map_err(|col| HmmError::SingularInformation {
        parameter: params[kept[col]].name.clone(),
    })?;

    let z = normal_quantile(0.5 + level / 2.0);
    let mut out = Vec::with_capacity(params.len());
    let mut kept_ix = 0;
    for (i, p) in params.iter().enumerate() {
        if kept_ix < n && kept[kept_ix] == i {
            let var = cov[kept_ix * n + kept_ix];
            if !(var > 0.0) {
                return Err(HmmError::SingularInformation {
                    parameter: p.name.clone(),
                });
            }
            let se = var.sqrt();
            out.push(IntervalRow {
                parameter: p.name.clone(),
                estimate: p.value,
                interval: Some(WaldInterval {
                    se,
                    lower: p.value - z * se,
                    upper: p.value + z * se,
                }),
            });
            kept_ix += 1;
        } else {
            out.push(IntervalRow {
                parameter: p.name.clone(),
                estimate: p.value,
                interval: None,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::em_fit;
    use crate::model::{GaussianEmission, MultinomialLogit, Record, Schema, TimeSeries};
    use crate::params::free_parameter_names;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn application_shaped_model(k: usize, mnar: bool) -> HmmModel {
        // One covariate on the initial and transition logits (a treatment
        // indicator, say); zero coefficients keep the distributions uniform.
        let initial = MultinomialLogit::new(k, 1, vec![0.0; (k - 1) * 2]).unwrap();
        let transitions = (0..k)
            .map(|_| MultinomialLogit::new(k, 1, vec![0.0; (k - 1) * 2]).unwrap())
            .collect();
        let emissions = (0..k)
            .map(|i| GaussianEmission::new(i as f64, 1.0))
            .collect();
        let (missingness, miss_cov) = if mnar {
            (
                MissingnessModel::StateLogistic {
                    coefficients: vec![vec![0.0, 0.0, 0.0]; k],
                },
                vec!["week".to_string(), "main".to_string()],
            )
        } else {
            (MissingnessModel::Ignorable, Vec::new())
        };
        HmmModel::new(
            k,
            initial,
            transitions,
            emissions,
            missingness,
            vec!["drug".into()],
            vec!["drug".into()],
            miss_cov,
        )
        .unwrap()
    }

    #[test]
    fn counts_match_reference_table_conventions() {
        // 2..5-state ignorable models with one covariate on initial and
        // transition logits.
        let expect_raw = [16, 30, 48, 70];
        let expect_free = [10, 22, 38, 58];
        for (i, k) in (2..=5).enumerate() {
            let c = count_parameters(
                &application_shaped_model(k, false),
                MissingnessConstraint::None,
            );
            assert_eq!(c.raw, expect_raw[i], "raw at k={k}");
            assert_eq!(c.free, expect_free[i], "free at k={k}");
        }
        // Same with a 3-coefficient logistic missingness submodel.
        let expect_raw = [22, 39, 60, 85];
        let expect_free = [16, 31, 50, 73];
        for (i, k) in (2..=5).enumerate() {
            let c = count_parameters(
                &application_shaped_model(k, true),
                MissingnessConstraint::None,
            );
            assert_eq!(c.raw, expect_raw[i], "raw at k={k}");
            assert_eq!(c.free, expect_free[i], "free at k={k}");
        }
        // K=1, no covariates, ignorable: mean and sd only.
        let single = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, 1.0)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        assert_eq!(count_free_parameters(&single), 2);
    }

    #[test]
    fn free_count_agrees_with_parameter_name_list() {
        for k in [1usize, 2, 3] {
            for mnar in [false, true] {
                let m = application_shaped_model(k, mnar);
                for constraint in [
                    MissingnessConstraint::None,
                    MissingnessConstraint::EqualAcrossStates,
                ] {
                    if m.missingness.is_ignorable()
                        && constraint == MissingnessConstraint::EqualAcrossStates
                    {
                        continue;
                    }
                    assert_eq!(
                        count_parameters(&m, constraint).free,
                        free_parameter_names(&m, constraint).len(),
                        "k={k} mnar={mnar} {constraint:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn information_criteria_formulas() {
        assert!((aic(-2266.603, 22) - 4577.206).abs() < 1e-9);
        assert!((bic(-2266.603, 22, 1603) - 4695.558).abs() < 0.5);
        assert_eq!(aic(0.0, 0), 0.0);
        // BIC exceeds AIC once ln(nobs) > 2.
        assert!(bic(-100.0, 5, 100) > aic(-100.0, 5));
    }

    #[test]
    fn constraining_drops_the_expected_parameter_count() {
        let m = application_shaped_model(3, true);
        let free = count_parameters(&m, MissingnessConstraint::None).free;
        let constrained = count_parameters(&m, MissingnessConstraint::EqualAcrossStates).free;
        assert_eq!(free - constrained, 6); // (K-1) * (1 + 2 covariates)

        let (averaged, cfg) = constrain_missingness_equal(&m, &FitConfig::default()).unwrap();
        assert_eq!(cfg.constraint, MissingnessConstraint::EqualAcrossStates);
        match &averaged.missingness {
            MissingnessModel::StateLogistic { coefficients } => {
                assert!(coefficients.windows(2).all(|w| w[0] == w[1]));
            }
            other => panic!("unexpected {other:?}"),
        }

        // K = 1: constraining is a no-op on the parameters themselves.
        let single = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, 1.0)],
            MissingnessModel::StateBernoulli { phi: vec![0.3] },
        )
        .unwrap();
        let (same, _) = constrain_missingness_equal(&single, &FitConfig::default()).unwrap();
        assert_eq!(same, single);

        let ignorable = application_shaped_model(2, false);
        assert!(matches!(
            constrain_missingness_equal(&ignorable, &FitConfig::default()),
            Err(HmmError::InvalidConstraint(_))
        ));
    }

    #[test]
    fn likelihood_ratio_test_basics() {
        let same = likelihood_ratio_test(-10.0, -10.0, 3).unwrap();
        assert_eq!(same.statistic, 0.0);
        assert_eq!(same.p_value, 1.0);

        // df = 2 has the closed form p = exp(-x/2).
        let r = likelihood_ratio_test(-9.0, -10.0, 2).unwrap();
        assert!((r.statistic - 2.0).abs() < 1e-12);
        assert!((r.p_value - (-1.0f64).exp()).abs() < 1e-12);

        assert!(likelihood_ratio_test(-10.0, -10.0, 0).is_err());
        assert!(matches!(
            likelihood_ratio_test(-10.1, -10.0, 1),
            Err(HmmError::NestingViolation(_))
        ));
        // Tiny negative from convergence noise clamps to zero.
        let clamped = likelihood_ratio_test(-10.0 - 1e-9, -10.0, 1).unwrap();
        assert_eq!(clamped.statistic, 0.0);
    }

    #[test]
    fn chi_square_tail_matches_monte_carlo() {
        // 10^7 chi-square draws per df; the analytic tail must sit within
        // 3 Monte-Carlo standard errors of the empirical tail.
        let n = 10_000_000usize;
        for df in [1usize, 2, 4, 10] {
            let mut rng = ChaCha8Rng::seed_from_u64(df as u64);
            let x = df as f64; // statistic near the bulk, p in (0.2, 0.7)
            let mut exceed = 0usize;
            for _ in 0..n {
                let mut s = 0.0;
                for _ in 0..df {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s += z * z;
                }
                if s > x {
                    exceed += 1;
                }
            }
            let p_mc = exceed as f64 / n as f64;
            let p = chi_square_tail(x, df);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (p - p_mc).abs() < 3.0 * se + 1e-12,
                "df {df}: analytic {p} vs MC {p_mc} (se {se})"
            );
        }
    }

    fn gaussian_panel(n: usize, mean: f64, sd: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let series = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let y = mean + sd * z;
                TimeSeries::new(format!("s{i}"), vec![Record::observed(1, y, vec![])])
            })
            .collect();
        Dataset::new(Schema::empty(), series).unwrap()
    }

    #[test]
    fn wald_se_matches_analytic_gaussian_curvature() {
        // Single state, single timepoint: the ML problem is iid-Gaussian
        // estimation, where SE(mu) = sd_hat / sqrt(n) and SE(sigma) =
        // sd_hat / sqrt(2n) exactly.
        let data = gaussian_panel(400, 2.0, 1.5, 4);
        let start = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, 1.0)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let fit = em_fit(&start, &data, &FitConfig::default()).unwrap();
        let rows = approx_confidence_intervals(&fit, &data, 0.95).unwrap();
        assert_eq!(rows.len(), 2);
        let sd_hat = fit.model.emissions[0].sd;
        let n = 400.0f64;
        let se_mu = rows[0].interval.unwrap().se;
        let se_sd = rows[1].interval.unwrap().se;
        assert!(
            (se_mu - sd_hat / n.sqrt()).abs() < 1e-6,
            "SE(mu) {se_mu} vs {}",
            sd_hat / n.sqrt()
        );
        assert!(
            (se_sd - sd_hat / (2.0 * n).sqrt()).abs() < 1e-6,
            "SE(sigma) {se_sd} vs {}",
            sd_hat / (2.0 * n).sqrt()
        );
        // The interval brackets the estimate symmetrically.
        let iv = rows[0].interval.unwrap();
        assert!((iv.upper + iv.lower - 2.0 * rows[0].estimate).abs() < 1e-12);
    }

    #[test]
    fn wider_level_widens_every_interval() {
        let data = gaussian_panel(120, -1.0, 0.8, 9);
        let start = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, 1.0)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let fit = em_fit(&start, &data, &FitConfig::default()).unwrap();
        let narrow = approx_confidence_intervals(&fit, &data, 0.95).unwrap();
        let wide = approx_confidence_intervals(&fit, &data, 0.99).unwrap();
        for (a, b) in narrow.iter().zip(&wide) {
            let (a, b) = (a.interval.unwrap(), b.interval.unwrap());
            assert!(b.lower < a.lower && b.upper > a.upper);
        }
        assert!(approx_confidence_intervals(&fit, &data, 1.0).is_err());
    }

    #[test]
    fn boundary_estimates_are_flagged_not_intervaled() {
        // Data tight enough that a floored sigma still gives every record
        // positive density.
        let data = gaussian_panel(50, 0.1, SIGMA_FLOOR, 12);
        let mut model = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, SIGMA_FLOOR)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        model.emissions[0].mean = 0.1;
        let fit = FitResult {
            model,
            log_likelihood: 0.0,
            trace: vec![0.0],
            iterations: 0,
            converged: true,
            free_parameters: 2,
            constraint: MissingnessConstraint::None,
            warnings: vec![],
        };
        let rows = approx_confidence_intervals(&fit, &data, 0.95).unwrap();
        assert!(rows[0].interval.is_some(), "mean is interior");
        assert!(rows[1].interval.is_none(), "floored sigma is boundary");
    }

    #[test]
    fn comparison_rows_recompute_their_criteria() {
        let data = gaussian_panel(60, 0.5, 1.0, 21);
        let start1 = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, 1.0)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let fit1 = em_fit(&start1, &data, &FitConfig::default()).unwrap();
        let rows = compare_models(&[("one-state".into(), &fit1)], data.n_observed());
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert!((r.aic - (-2.0 * r.log_likelihood + 2.0 * r.free_parameters as f64)).abs() < 1e-9);
        assert!(
            (r.bic
                - (-2.0 * r.log_likelihood
                    + (data.n_observed() as f64).ln() * r.free_parameters as f64))
                .abs()
                < 1e-9
        );
        assert_eq!(best_by_bic(&rows), Some(0));
        let csv = comparison_csv(&rows);
        assert!(csv.starts_with("label,"));
        assert_eq!(csv.lines().count(), 2);
    }
}
