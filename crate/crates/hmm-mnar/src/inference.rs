//! Likelihood machinery: emission weights under each missingness regime,
//! the scaled forward-backward recursion, Viterbi decoding, and an
//! enumeration oracle for cross-checking.
//!
//! The forward pass uses per-step scaling in probability space (normalize the
//! forward vector by its sum `c_t` at every step) rather than a log-space
//! recursion; the log-likelihood is recovered as `sum_t ln c_t`. With the
//! same scaling applied to the backward pass, `gamma = alpha_hat * beta_hat`
//! needs no renormalization.
//!
//! Missing responses enter through the emission weight, never by imputation:
//!
//! * ignorable: weight 1 at missing records, the plain Gaussian density
//!   otherwise — marginalizing the unseen response exactly;
//! * state-Bernoulli: `phi_k` at missing records, `(1 - phi_k) * density`
//!   otherwise;
//! * state-logistic: as above with `phi_k` replaced by
//!   `logistic(coef_k . [1, x])` evaluated on the record's covariates.

use crate::error::{HmmError, Result};
use crate::model::{
    clamp_prob, Dataset, HmmModel, MissingnessModel, MultinomialLogit, Record, Schema, TimeSeries,
};

/// Hard ceiling on the number of paths [`brute_force_log_likelihood`] will
/// enumerate.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

/// Posterior summaries of one series under one model.
#[derive(Debug, Clone)]
pub struct Posteriors {
    pub n_states: usize,
    pub n_steps: usize,
    /// Smoothed state probabilities, `n_steps x n_states` row-major;
    /// each row sums to 1.
    pub gamma: Vec<f64>,
    /// Joint transition posteriors, `(n_steps - 1) x n_states x n_states`;
    /// slice `t` covers the transition from step `t` to `t + 1` and sums to 1.
    pub xi: Vec<f64>,
    /// Per-step scaling factors `c_t` (sums of the unnormalized forward
    /// vectors); `ln c_t` summed gives the log-likelihood.
    pub scaling: Vec<f64>,
    pub log_likelihood: f64,
}

impl Posteriors {
    pub fn gamma_at(&self, t: usize, k: usize) -> f64 {
        self.gamma[t * self.n_states + k]
    }

    pub fn xi_at(&self, t: usize, i: usize, j: usize) -> f64 {
        self.xi[(t * self.n_states + i) * self.n_states + j]
    }
}

/// A model whose covariate names have been resolved against a schema, with
/// covariate-free components precomputed once.
pub(crate) struct Prepared<'m> {
    pub(crate) model: &'m HmmModel,
    init_ix: Vec<usize>,
    trans_ix: Vec<usize>,
    miss_ix: Vec<usize>,
    /// Initial distribution when it carries no covariates.
    const_init: Option<Vec<f64>>,
    /// K x K transition matrix when transitions carry no covariates.
    const_trans: Option<Vec<f64>>,
}

/// Reusable buffers so the EM inner loop allocates nothing per iteration.
pub(crate) struct Scratch {
    weights: Vec<f64>,
    trans: Vec<f64>,
    beta: Vec<f64>,
    init: Vec<f64>,
    probs: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new() -> Self {
        Scratch {
            weights: Vec::new(),
            trans: Vec::new(),
            beta: Vec::new(),
            init: Vec::new(),
            probs: Vec::new(),
        }
    }
}

/// Softmax of a multinomial logit evaluated on covariates gathered from a
/// record's row by index (avoids building an intermediate covariate vector).
fn softmax_indexed(ml: &MultinomialLogit, row: &[f64], idx: &[usize], out: &mut [f64]) {
    let k = ml.n_categories();
    let width = 1 + ml.n_covariates();
    let coef = ml.coefficients();
    debug_assert_eq!(idx.len(), ml.n_covariates());
    out[0] = 0.0;
    let mut max = 0.0f64;
    for c in 1..k {
        let r = &coef[(c - 1) * width..c * width];
        let mut eta = r[0];
        for (j, &ix) in idx.iter().enumerate() {
            eta += r[j + 1] * row[ix];
        }
        out[c] = eta;
        if eta > max {
            max = eta;
        }
    }
    let mut sum = 0.0;
    for v in out[..k].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out[..k].iter_mut() {
        *v /= sum;
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

impl HmmModel {
    pub(crate) fn prepare(&self, schema: &Schema) -> Result<Prepared<'_>> {
        self.validate()?;
        let init_ix = schema.resolve(&self.initial_covariates)?;
        let trans_ix = schema.resolve(&self.transition_covariates)?;
        let miss_ix = schema.resolve(&self.missingness_covariates)?;
        let k = self.n_states;
        let const_init = if init_ix.is_empty() {
            Some(self.initial.probs(&[]))
        } else {
            None
        };
        let const_trans = if trans_ix.is_empty() {
            let mut m = vec![0.0; k * k];
            for i in 0..k {
                self.transitions[i].probs_into(&[], &mut m[i * k..(i + 1) * k]);
            }
            Some(m)
        } else {
            None
        };
        Ok(Prepared {
            model: self,
            init_ix,
            trans_ix,
            miss_ix,
            const_init,
            const_trans,
        })
    }
}

impl Prepared<'_> {
    fn k(&self) -> usize {
        self.model.n_states
    }

    fn initial_into(&self, record: &Record, out: &mut [f64]) {
        match &self.const_init {
            Some(p) => out.copy_from_slice(p),
            None => softmax_indexed(&self.model.initial, &record.covariates, &self.init_ix, out),
        }
    }

    /// Transition matrix governing the step *into* `record`'s successor —
    /// i.e. row covariates are taken from the origin record.
    fn transition_row_into(&self, origin: &Record, i: usize, out: &mut [f64]) {
        softmax_indexed(
            &self.model.transitions[i],
            &origin.covariates,
            &self.trans_ix,
            out,
        );
    }

    /// Probability that the response is missing given state `k` (clamped).
    /// `None` under ignorable missingness, where the indicator is not modeled.
    fn missing_prob(&self, k: usize, record: &Record) -> Option<f64> {
        match &self.model.missingness {
            MissingnessModel::Ignorable => None,
            MissingnessModel::StateBernoulli { phi } => Some(clamp_prob(phi[k])),
            MissingnessModel::StateLogistic { coefficients } => {
                let row = &coefficients[k];
                let mut eta = row[0];
                for (j, &ix) in self.miss_ix.iter().enumerate() {
                    eta += row[j + 1] * record.covariates[ix];
                }
                Some(clamp_prob(logistic(eta)))
            }
        }
    }

    pub(crate) fn emission_weight(&self, k: usize, record: &Record) -> f64 {
        let phi = self.missing_prob(k, record);
        match record.y() {
            None => phi.unwrap_or(1.0),
            Some(y) => {
                let dens = self.model.emissions[k].density(y);
                match phi {
                    None => dens,
                    Some(p) => (1.0 - p) * dens,
                }
            }
        }
    }

    fn fill_weights(&self, series: &TimeSeries, weights: &mut Vec<f64>) {
        let k = self.k();
        weights.clear();
        weights.reserve(series.len() * k);
        for rec in &series.records {
            for s in 0..k {
                weights.push(self.emission_weight(s, rec));
            }
        }
    }

    /// Fill the per-step transition matrices for a series into `buf` and
    /// return the stride (0 when one constant matrix serves every step).
    fn fill_transitions(&self, series: &TimeSeries, buf: &mut Vec<f64>) -> usize {
        let k = self.k();
        buf.clear();
        if let Some(m) = &self.const_trans {
            buf.extend_from_slice(m);
            return 0;
        }
        let steps = series.len().saturating_sub(1);
        buf.resize(steps * k * k, 0.0);
        for t in 0..steps {
            let origin = &series.records[t];
            for i in 0..k {
                let base = t * k * k + i * k;
                self.transition_row_into(origin, i, &mut buf[base..base + k]);
            }
        }
        k * k
    }

    /// Forward pass only; returns the log-likelihood.
    pub(crate) fn loglik(&self, series: &TimeSeries, scratch: &mut Scratch) -> Result<f64> {
        let k = self.k();
        let t_len = series.len();
        self.fill_weights(series, &mut scratch.weights);
        let stride = self.fill_transitions(series, &mut scratch.trans);
        scratch.init.resize(k, 0.0);
        self.initial_into(&series.records[0], &mut scratch.init);

        scratch.probs.resize(2 * k, 0.0);
        let (alpha, next) = scratch.probs.split_at_mut(k);
        let mut ll = 0.0;
        let mut c = 0.0;
        for s in 0..k {
            alpha[s] = scratch.init[s] * scratch.weights[s];
            c += alpha[s];
        }
        check_scale(c, series, 1)?;
        for a in alpha.iter_mut() {
            *a /= c;
        }
        ll += c.ln();
        for t in 1..t_len {
            let a_mat = &scratch.trans[t.saturating_sub(1) * stride..];
            let w = &scratch.weights[t * k..(t + 1) * k];
            let mut ct = 0.0;
            for (j, nj) in next.iter_mut().enumerate() {
                let mut s = 0.0;
                for (i, &ai) in alpha.iter().enumerate() {
                    s += ai * a_mat[i * k + j];
                }
                *nj = s * w[j];
                ct += *nj;
            }
            check_scale(ct, series, t + 1)?;
            for (a, n) in alpha.iter_mut().zip(next.iter()) {
                *a = *n / ct;
            }
            ll += ct.ln();
        }
        Ok(ll)
    }

    /// Full forward-backward pass.
    pub(crate) fn posteriors(
        &self,
        series: &TimeSeries,
        scratch: &mut Scratch,
    ) -> Result<Posteriors> {
        let k = self.k();
        let t_len = series.len();
        self.fill_weights(series, &mut scratch.weights);
        let stride = self.fill_transitions(series, &mut scratch.trans);
        scratch.init.resize(k, 0.0);
        self.initial_into(&series.records[0], &mut scratch.init);

        let mut gamma = vec![0.0; t_len * k]; // holds scaled alpha until the end
        let mut scaling = vec![0.0; t_len];

        // Forward.
        let mut c = 0.0;
        for s in 0..k {
            gamma[s] = scratch.init[s] * scratch.weights[s];
            c += gamma[s];
        }
        check_scale(c, series, 1)?;
        for g in gamma[..k].iter_mut() {
            *g /= c;
        }
        scaling[0] = c;
        for t in 1..t_len {
            let a_mat = &scratch.trans[(t - 1) * stride..];
            let (prev_rows, cur_rows) = gamma.split_at_mut(t * k);
            let prev = &prev_rows[(t - 1) * k..];
            let cur = &mut cur_rows[..k];
            let w = &scratch.weights[t * k..(t + 1) * k];
            let mut ct = 0.0;
            for (j, cj) in cur.iter_mut().enumerate() {
                let mut s = 0.0;
                for (i, &pi) in prev.iter().enumerate() {
                    s += pi * a_mat[i * k + j];
                }
                *cj = s * w[j];
                ct += *cj;
            }
            check_scale(ct, series, t + 1)?;
            for v in cur.iter_mut() {
                *v /= ct;
            }
            scaling[t] = ct;
        }
        let log_likelihood = scaling.iter().map(|c| c.ln()).sum();

        // Backward (scaled so beta stays O(1)).
        scratch.beta.clear();
        scratch.beta.resize(t_len * k, 0.0);
        let beta = &mut scratch.beta;
        for b in beta[(t_len - 1) * k..].iter_mut() {
            *b = 1.0;
        }
        for t in (0..t_len - 1).rev() {
            let a_mat = &scratch.trans[t * stride..];
            let w = &scratch.weights[(t + 1) * k..(t + 2) * k];
            let cnext = scaling[t + 1];
            for i in 0..k {
                let mut s = 0.0;
                for j in 0..k {
                    s += a_mat[i * k + j] * w[j] * beta[(t + 1) * k + j];
                }
                beta[t * k + i] = s / cnext;
            }
        }

        // Transition posteriors, then smooth gamma in place.
        let mut xi = vec![0.0; t_len.saturating_sub(1) * k * k];
        for t in 0..t_len.saturating_sub(1) {
            let a_mat = &scratch.trans[t * stride..];
            let w = &scratch.weights[(t + 1) * k..(t + 2) * k];
            let cnext = scaling[t + 1];
            for i in 0..k {
                let alpha_i = gamma[t * k + i];
                for j in 0..k {
                    xi[(t * k + i) * k + j] =
                        alpha_i * a_mat[i * k + j] * w[j] * beta[(t + 1) * k + j] / cnext;
                }
            }
        }
        for t in 0..t_len {
            for s in 0..k {
                gamma[t * k + s] *= beta[t * k + s];
            }
        }

        Ok(Posteriors {
            n_states: k,
            n_steps: t_len,
            gamma,
            xi,
            scaling,
            log_likelihood,
        })
    }
}

fn check_scale(c: f64, series: &TimeSeries, step: usize) -> Result<()> {
    if c > 0.0 && c.is_finite() {
        Ok(())
    } else {
        Err(HmmError::NumericalDegeneracy {
            series: series.id.clone(),
            step,
        })
    }
}

/// Initial state probabilities for a record's covariates.
pub fn initial_probs(model: &HmmModel, schema: &Schema, record: &Record) -> Result<Vec<f64>> {
    let prep = model.prepare(schema)?;
    let mut out = vec![0.0; model.n_states];
    prep.initial_into(record, &mut out);
    Ok(out)
}

/// K x K row-major transition matrix for a transition *leaving* `origin`
/// (rows = origin state, columns = destination).
pub fn transition_matrix(model: &HmmModel, schema: &Schema, origin: &Record) -> Result<Vec<f64>> {
    let prep = model.prepare(schema)?;
    let k = model.n_states;
    let mut out = vec![0.0; k * k];
    match &prep.const_trans {
        Some(m) => out.copy_from_slice(m),
        None => {
            for i in 0..k {
                prep.transition_row_into(origin, i, &mut out[i * k..(i + 1) * k]);
            }
        }
    }
    Ok(out)
}

/// Joint weight of a record's observables given state `k` (0-based): the
/// response density and/or the missingness factor, per the model's regime.
pub fn emission_weight(
    model: &HmmModel,
    schema: &Schema,
    k: usize,
    record: &Record,
) -> Result<f64> {
    if k >= model.n_states {
        return Err(HmmError::InvalidModel(format!(
            "state index {k} out of range for {} states",
            model.n_states
        )));
    }
    let prep = model.prepare(schema)?;
    Ok(prep.emission_weight(k, record))
}

/// Scaled forward-backward pass over one series.
pub fn forward_backward(
    model: &HmmModel,
    schema: &Schema,
    series: &TimeSeries,
) -> Result<Posteriors> {
    if series.is_empty() {
        return Err(HmmError::InvalidData(format!(
            "series `{}` is empty",
            series.id
        )));
    }
    let prep = model.prepare(schema)?;
    prep.posteriors(series, &mut Scratch::new())
}

/// Total log-likelihood of a dataset (sum of per-series forward passes).
pub fn log_likelihood(model: &HmmModel, dataset: &Dataset) -> Result<f64> {
    let prep = model.prepare(dataset.schema())?;
    let mut scratch = Scratch::new();
    let mut ll = 0.0;
    for s in dataset.series() {
        ll += prep.loglik(s, &mut scratch)?;
    }
    Ok(ll)
}

/// Log-likelihood by exhaustive enumeration of all `K^T` state paths, in log
/// space with a streaming max-shift. Exponentially slow by design — this is
/// the oracle the recursion is checked against.
pub fn brute_force_log_likelihood(
    model: &HmmModel,
    schema: &Schema,
    series: &TimeSeries,
) -> Result<f64> {
    if series.is_empty() {
        return Err(HmmError::InvalidData(format!(
            "series `{}` is empty",
            series.id
        )));
    }
    let prep = model.prepare(schema)?;
    let k = model.n_states;
    let t_len = series.len();
    let n_paths = (k as f64).powi(t_len as i32);
    if !(n_paths <= ENUMERATION_LIMIT as f64) {
        return Err(HmmError::CapacityExceeded {
            states: k,
            steps: t_len,
            limit: ENUMERATION_LIMIT,
        });
    }

    // Log-domain ingredients; ln(0) = -inf paths simply contribute nothing.
    let mut scratch = Scratch::new();
    prep.fill_weights(series, &mut scratch.weights);
    let stride = prep.fill_transitions(series, &mut scratch.trans);
    let ln_w: Vec<f64> = scratch.weights.iter().map(|w| w.ln()).collect();
    let ln_a: Vec<f64> = scratch.trans.iter().map(|a| a.ln()).collect();
    scratch.init.resize(k, 0.0);
    prep.initial_into(&series.records[0], &mut scratch.init);
    let ln_init: Vec<f64> = scratch.init.iter().map(|p| p.ln()).collect();

    let mut path = vec![0usize; t_len];
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    loop {
        let mut lp = ln_init[path[0]] + ln_w[path[0]];
        for t in 1..t_len {
            lp += ln_a[(t - 1) * stride + path[t - 1] * k + path[t]] + ln_w[t * k + path[t]];
            if lp == f64::NEG_INFINITY {
                break;
            }
        }
        if lp > max {
            // New running maximum: rescale the accumulated sum.
            sum = sum * (max - lp).exp() + 1.0;
            max = lp;
        } else if lp > f64::NEG_INFINITY {
            sum += (lp - max).exp();
        }
        // Odometer increment over paths.
        let mut pos = t_len;
        loop {
            if pos == 0 {
                break;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
        }
        if pos == 0 && path[0] == 0 {
            break;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(HmmError::NumericalDegeneracy {
            series: series.id.clone(),
            step: t_len,
        });
    }
    Ok(max + sum.ln())
}

/// Most probable state path (0-based states). Ties are broken toward the
/// lower state index, so decoding is fully deterministic.
pub fn viterbi(model: &HmmModel, schema: &Schema, series: &TimeSeries) -> Result<Vec<usize>> {
    if series.is_empty() {
        return Err(HmmError::InvalidData(format!(
            "series `{}` is empty",
            series.id
        )));
    }
    let prep = model.prepare(schema)?;
    let k = model.n_states;
    let t_len = series.len();

    let mut scratch = Scratch::new();
    prep.fill_weights(series, &mut scratch.weights);
    let stride = prep.fill_transitions(series, &mut scratch.trans);
    scratch.init.resize(k, 0.0);
    prep.initial_into(&series.records[0], &mut scratch.init);

    let mut delta: Vec<f64> = (0..k)
        .map(|s| scratch.init[s].ln() + scratch.weights[s].ln())
        .collect();
    let mut next = vec![0.0; k];
    let mut psi = vec![0usize; t_len.saturating_sub(1) * k];
    for t in 1..t_len {
        let a_mat = &scratch.trans[(t - 1) * stride..];
        for j in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0usize;
            for (i, &di) in delta.iter().enumerate() {
                let cand = di + a_mat[i * k + j].ln();
                if cand > best {
                    best = cand;
                    arg = i;
                }
            }
            next[j] = best + scratch.weights[t * k + j].ln();
            psi[(t - 1) * k + j] = arg;
        }
        delta.copy_from_slice(&next);
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0usize;
    for (s, &d) in delta.iter().enumerate() {
        if d > best {
            best = d;
            last = s;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(HmmError::NumericalDegeneracy {
            series: series.id.clone(),
            step: t_len,
        });
    }
    let mut path = vec![0usize; t_len];
    path[t_len - 1] = last;
    for t in (1..t_len).rev() {
        path[t - 1] = psi[(t - 1) * k + path[t]];
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GaussianEmission;

    fn series_obs(ys: &[f64]) -> TimeSeries {
        TimeSeries::new(
            "s",
            ys.iter()
                .enumerate()
                .map(|(i, &y)| Record::observed(i as u32 + 1, y, vec![]))
                .collect(),
        )
    }

    fn unit_gauss(k: usize) -> Vec<GaussianEmission> {
        (0..k)
            .map(|i| GaussianEmission::new(i as f64, 1.0))
            .collect()
    }

    #[test]
    fn initial_probs_reference_values() {
        let schema = Schema::empty();
        let rec = Record::observed(1, 0.0, vec![]);
        // Uniform three-state logit.
        let m = HmmModel::homogeneous(
            &[1.0 / 3.0; 3],
            &[1.0 / 3.0; 9],
            unit_gauss(3),
            MissingnessModel::Ignorable,
        )
        .unwrap();
        for p in initial_probs(&m, &schema, &rec).unwrap() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // The simulation-scenario initial distribution.
        let m = HmmModel::homogeneous(
            &[0.8, 0.1, 0.1],
            &[1.0 / 3.0; 9],
            unit_gauss(3),
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let p = initial_probs(&m, &schema, &rec).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-12);
        assert!((p[1] - 0.1).abs() < 1e-12);
        assert!((p[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn initial_probs_with_covariate() {
        // Two states, one covariate: eta_2 = 0.5 + 1.0 x. At x = 2,
        // p = (1, e^2.5) / (1 + e^2.5).
        let schema = Schema::new(["x"]).unwrap();
        let m = HmmModel::new(
            2,
            MultinomialLogit::new(2, 1, vec![0.5, 1.0]).unwrap(),
            vec![MultinomialLogit::uniform(2); 2],
            unit_gauss(2),
            MissingnessModel::Ignorable,
            vec!["x".into()],
            vec![],
            vec![],
        )
        .unwrap();
        let rec = Record::observed(1, 0.0, vec![2.0]);
        let p = initial_probs(&m, &schema, &rec).unwrap();
        let e = (2.5f64).exp();
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-14);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-14);
    }

    #[test]
    fn transition_matrix_reference_values() {
        let schema = Schema::empty();
        let rec = Record::observed(1, 0.0, vec![]);
        let a = [
            0.75, 0.125, 0.125, //
            0.125, 0.75, 0.125, //
            0.125, 0.125, 0.75,
        ];
        let m = HmmModel::homogeneous(
            &[0.8, 0.1, 0.1],
            &a,
            unit_gauss(3),
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let got = transition_matrix(&m, &schema, &rec).unwrap();
        for (g, e) in got.iter().zip(a.iter()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn emission_weight_all_regimes() {
        let schema = Schema::empty();
        let gauss = vec![GaussianEmission::new(0.0, 1.0)];
        let missing = Record::missing(1, vec![]);
        let at_mean = Record::observed(1, 0.0, vec![]);

        // Ignorable: weight 1 at a missing record.
        let m = HmmModel::homogeneous(&[1.0], &[1.0], gauss.clone(), MissingnessModel::Ignorable)
            .unwrap();
        assert_eq!(emission_weight(&m, &schema, 0, &missing).unwrap(), 1.0);
        // Observed: plain density, 1/sqrt(2 pi) at the mean.
        let w = emission_weight(&m, &schema, 0, &at_mean).unwrap();
        assert!((w - 0.398_942_280_401_432_7).abs() < 1e-15);

        // State-Bernoulli, phi = 0.5: missing record weighs exactly phi.
        let m = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            gauss.clone(),
            MissingnessModel::StateBernoulli { phi: vec![0.5] },
        )
        .unwrap();
        assert!((emission_weight(&m, &schema, 0, &missing).unwrap() - 0.5).abs() < 1e-15);
        // Observed at the mean with phi = 0.25: 0.75 / sqrt(2 pi).
        let m = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            gauss.clone(),
            MissingnessModel::StateBernoulli { phi: vec![0.25] },
        )
        .unwrap();
        let w = emission_weight(&m, &schema, 0, &at_mean).unwrap();
        assert!((w - 0.299_206_710_301_074_5).abs() < 1e-12, "{w}");

        // State-logistic with zero slope == Bernoulli at logistic(intercept).
        let schema_x = Schema::new(["x"]).unwrap();
        let m = HmmModel::new(
            1,
            MultinomialLogit::uniform(1),
            vec![MultinomialLogit::uniform(1)],
            gauss,
            MissingnessModel::StateLogistic {
                coefficients: vec![vec![-1.098_612_288_668_109_8, 0.0]], // logit(0.25)
            },
            vec![],
            vec![],
            vec!["x".into()],
        )
        .unwrap();
        let rec = Record::missing(1, vec![3.0]);
        let w = emission_weight(&m, &schema_x, 0, &rec).unwrap();
        assert!((w - 0.25).abs() < 1e-12, "{w}");
    }

    #[test]
    fn forward_single_state_reference() {
        // K = 1, two standard-normal observations at 0:
        // LL = 2 ln(1/sqrt(2 pi)) = -1.8378770664093453.
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, 1.0)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let s = series_obs(&[0.0, 0.0]);
        let post = forward_backward(&m, &schema, &s).unwrap();
        assert!((post.log_likelihood + 1.837_877_066_409_345_3).abs() < 1e-12);
        let bf = brute_force_log_likelihood(&m, &schema, &s).unwrap();
        assert!((post.log_likelihood - bf).abs() < 1e-12);
    }

    #[test]
    fn all_missing_series_has_zero_loglik_under_ignorable() {
        // Every record missing and weights are 1, so L = 1 and LL = 0.
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[0.3, 0.7],
            &[0.6, 0.4, 0.2, 0.8],
            unit_gauss(2),
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let s = TimeSeries::new("s", (1..=4).map(|t| Record::missing(t, vec![])).collect());
        let post = forward_backward(&m, &schema, &s).unwrap();
        assert!(post.log_likelihood.abs() < 1e-12);
    }

    #[test]
    fn trailing_missing_record_does_not_change_ignorable_loglik() {
        // Marginalization exactness: appending an unobserved step multiplies
        // the likelihood by sum_j A[i][j] * 1 = 1.
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[0.3, 0.7],
            &[0.6, 0.4, 0.2, 0.8],
            unit_gauss(2),
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let base = series_obs(&[0.4, -1.0, 0.9]);
        let mut extended = base.clone();
        extended.records.push(Record::missing(4, vec![]));
        let a = forward_backward(&m, &schema, &base).unwrap().log_likelihood;
        let b = forward_backward(&m, &schema, &extended)
            .unwrap()
            .log_likelihood;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn posteriors_are_proper_distributions() {
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[0.8, 0.1, 0.1],
            &[0.75, 0.125, 0.125, 0.125, 0.75, 0.125, 0.125, 0.125, 0.75],
            unit_gauss(3),
            MissingnessModel::StateBernoulli {
                phi: vec![0.05, 0.25, 0.5],
            },
        )
        .unwrap();
        let mut s = series_obs(&[0.2, -0.7, 1.4, 0.0, 2.2]);
        s.records[2] = Record::missing(3, vec![]);
        let post = forward_backward(&m, &schema, &s).unwrap();
        for t in 0..post.n_steps {
            let row: f64 = (0..3).map(|k| post.gamma_at(t, k)).sum();
            assert!((row - 1.0).abs() < 1e-10, "gamma row {t} sums to {row}");
        }
        for t in 0..post.n_steps - 1 {
            let mut slice = 0.0;
            for i in 0..3 {
                let from_xi: f64 = (0..3).map(|j| post.xi_at(t, i, j)).sum();
                slice += from_xi;
                // xi marginalized over destinations is gamma at the origin.
                assert!(
                    (from_xi - post.gamma_at(t, i)).abs() < 1e-8,
                    "xi/gamma mismatch at ({t},{i})"
                );
            }
            assert!((slice - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn state_permutation_leaves_likelihood_invariant() {
        let schema = Schema::empty();
        let init = [0.5, 0.3, 0.2];
        let trans = [
            0.7, 0.2, 0.1, //
            0.1, 0.6, 0.3, //
            0.25, 0.25, 0.5,
        ];
        let phis = [0.05, 0.25, 0.5];
        let means = [-1.0, 0.0, 1.0];
        let perm = [2usize, 0, 1]; // new index -> old index
        let build = |order: &[usize]| {
            let k = order.len();
            let mut t2 = vec![0.0; k * k];
            for (ni, &oi) in order.iter().enumerate() {
                for (nj, &oj) in order.iter().enumerate() {
                    t2[ni * k + nj] = trans[oi * k + oj];
                }
            }
            HmmModel::homogeneous(
                &order.iter().map(|&o| init[o]).collect::<Vec<_>>(),
                &t2,
                order
                    .iter()
                    .map(|&o| GaussianEmission::new(means[o], 1.0))
                    .collect(),
                MissingnessModel::StateBernoulli {
                    phi: order.iter().map(|&o| phis[o]).collect(),
                },
            )
            .unwrap()
        };
        let m0 = build(&[0, 1, 2]);
        let m1 = build(&perm);
        let mut s = series_obs(&[0.1, -0.4, 1.9, 0.3]);
        s.records[1] = Record::missing(2, vec![]);
        let p0 = forward_backward(&m0, &schema, &s).unwrap();
        let p1 = forward_backward(&m1, &schema, &s).unwrap();
        assert!((p0.log_likelihood - p1.log_likelihood).abs() < 1e-9);
        for t in 0..s.len() {
            for (nk, &ok) in perm.iter().enumerate() {
                assert!((p1.gamma_at(t, nk) - p0.gamma_at(t, ok)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn brute_force_respects_capacity_limit() {
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
            unit_gauss(2),
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let s = series_obs(&vec![0.0; 32]); // 2^32 paths
        match brute_force_log_likelihood(&m, &schema, &s) {
            Err(HmmError::CapacityExceeded { .. }) => {}
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn viterbi_single_state_is_constant_path() {
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[1.0],
            &[1.0],
            vec![GaussianEmission::new(0.0, 1.0)],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let s = series_obs(&[0.3, -0.2, 0.8]);
        assert_eq!(viterbi(&m, &schema, &s).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn viterbi_identity_transition_pins_initial_state() {
        // Initial mass on state 1 (index 0) and an identity transition
        // matrix: the path stays at state 0 even though every observation
        // sits on the other state's mean. Zero probabilities are stored
        // clamped (not exact), so the pin holds as long as the emission
        // preference stays below the ~27.6-nat clamp penalty.
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[1.0, 0.0],
            &[1.0, 0.0, 0.0, 1.0],
            vec![
                GaussianEmission::new(0.0, 1.0),
                GaussianEmission::new(1.0, 1.0),
            ],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let s = series_obs(&[1.0, 1.0, 1.0]);
        assert_eq!(viterbi(&m, &schema, &s).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn viterbi_ties_break_toward_lower_index() {
        // Fully symmetric two-state model: every path is equally likely,
        // so the decoder must return all-zeros.
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
            vec![
                GaussianEmission::new(0.0, 1.0),
                GaussianEmission::new(0.0, 1.0),
            ],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let s = series_obs(&[0.1, -0.5, 0.3]);
        assert_eq!(viterbi(&m, &schema, &s).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn viterbi_prefers_emission_matched_states_when_free() {
        let schema = Schema::empty();
        let m = HmmModel::homogeneous(
            &[0.5, 0.5],
            &[0.5, 0.5, 0.5, 0.5],
            vec![
                GaussianEmission::new(-2.0, 1.0),
                GaussianEmission::new(2.0, 1.0),
            ],
            MissingnessModel::Ignorable,
        )
        .unwrap();
        let s = series_obs(&[-2.1, 2.2, -1.9, 2.4]);
        assert_eq!(viterbi(&m, &schema, &s).unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn missingness_scaling_does_not_change_viterbi_path() {
        // With equal phi in every state the missingness factor rescales each
        // step uniformly, so the decoded path matches the ignorable model's.
        let schema = Schema::empty();
        let mk = |missing: MissingnessModel| {
            HmmModel::homogeneous(
                &[0.6, 0.4],
                &[0.8, 0.2, 0.3, 0.7],
                vec![
                    GaussianEmission::new(-1.0, 1.0),
                    GaussianEmission::new(1.0, 1.0),
                ],
                missing,
            )
            .unwrap()
        };
        let ign = mk(MissingnessModel::Ignorable);
        let mnar = mk(MissingnessModel::StateBernoulli {
            phi: vec![0.3, 0.3],
        });
        let mut s = series_obs(&[-0.9, 1.2, 0.1, -1.4]);
        s.records[2] = Record::missing(3, vec![]);
        assert_eq!(
            viterbi(&ign, &schema, &s).unwrap(),
            viterbi(&mnar, &schema, &s).unwrap()
        );
    }
}
