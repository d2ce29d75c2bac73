//! Weighted logistic and multinomial-logit maximum likelihood — the inner
//! solvers of the EM M-step, also used standalone for missingness GLMs.
//!
//! Both solvers are damped Newton iterations on the *weighted* log-likelihood:
//! the candidate step is halved until the objective does not decrease, so a
//! warm-started call can only improve its objective — which is exactly what a
//! generalized EM step needs to preserve likelihood monotonicity.
//!
//! A small ridge (default 1e-8) stabilizes the normal equations, and
//! coefficients are capped at magnitude [`COEF_CAP`]; hitting the cap sets a
//! `separation` flag instead of erroring, since (quasi-)separated weighted
//! subproblems are routine during EM.

use crate::error::{HmmError, Result};
use crate::linalg::{cholesky_solve, invert};
use crate::model::{clamp_prob, COEF_CAP};

/// Tuning knobs for the Newton solvers.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop when the max-abs gradient component falls below this.
    pub grad_tol: f64,
    /// Ridge added to the normal-equation diagonal.
    pub ridge: f64,
    /// Coefficient magnitude cap (separation guard).
    pub coef_cap: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 100,
            grad_tol: 1e-8,
            ridge: 1e-8,
            coef_cap: COEF_CAP,
        }
    }
}

/// Result of a logistic fit.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub coefficients: Vec<f64>,
    /// Weighted Bernoulli log-likelihood at the returned coefficients.
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Gradient tolerance met.
    pub converged: bool,
    /// Some coefficient sits at the magnitude cap.
    pub separation: bool,
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Weighted Bernoulli log-likelihood with clamped probabilities.
fn logistic_ll(x: &[f64], p: usize, y: &[f64], w: &[f64], beta: &[f64]) -> f64 {
    let n = y.len();
    let mut ll = 0.0;
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let mut eta = 0.0;
        for j in 0..p {
            eta += x[i * p + j] * beta[j];
        }
        let pr = clamp_prob(logistic(eta));
        ll += w[i] * (y[i] * pr.ln() + (1.0 - y[i]) * (1.0 - pr).ln());
    }
    ll
}

/// Maximize the weighted Bernoulli log-likelihood
/// `sum_i w_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]`, `p_i = logistic(x_i . b)`,
/// by ridge-damped Newton (IRLS) with step halving.
///
/// * `x`: n x p row-major design matrix — include the intercept column yourself.
/// * `y`: targets in `[0, 1]` (usually 0/1 indicators).
/// * `w`: nonnegative case weights (posterior state probabilities during EM).
/// * `start`: warm start; zeros otherwise.
///
/// Non-convergence is reported via `converged = false` on the result, never
/// as an error; only a singular system errors out.
pub fn logistic_irls(
    x: &[f64],
    p: usize,
    y: &[f64],
    w: &[f64],
    start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<LogisticFit> {
    let n = y.len();
    if p == 0 || n == 0 || x.len() != n * p || w.len() != n {
        return Err(HmmError::InvalidData(format!(
            "logistic design shape mismatch: x = {}, p = {p}, y = {n}, w = {}",
            x.len(),
            w.len()
        )));
    }
    let cap = opts.coef_cap;
    let mut beta: Vec<f64> = match start {
        Some(b) => {
            debug_assert_eq!(b.len(), p);
            b.iter().map(|v| v.clamp(-cap, cap)).collect()
        }
        None => vec![0.0; p],
    };
    let mut ll = logistic_ll(x, p, y, w, &beta);
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        // Gradient and expected information at the current point.
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let row = &x[i * p..(i + 1) * p];
            let mut eta = 0.0;
            for j in 0..p {
                eta += row[j] * beta[j];
            }
            let pr = logistic(eta);
            let r = w[i] * (y[i] - pr);
            let v = w[i] * pr * (1.0 - pr);
            for j in 0..p {
                grad[j] += r * row[j];
                for l in j..p {
                    hess[j * p + l] += v * row[j] * row[l];
                }
            }
        }
        for j in 0..p {
            for l in 0..j {
                hess[j * p + l] = hess[l * p + j];
            }
            hess[j * p + j] += opts.ridge;
        }
        if grad.iter().all(|g| g.abs() <= opts.grad_tol) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut step_dir = grad.clone();
        cholesky_solve(&mut hess, &mut step_dir).map_err(|_| HmmError::SingularMatrix {
            context: "logistic normal equations".into(),
        })?;

        // Halve until the objective does not decrease.
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..45 {
            let trial: Vec<f64> = beta
                .iter()
                .zip(&step_dir)
                .map(|(b, d)| (b + scale * d).clamp(-cap, cap))
                .collect();
            let ll_try = logistic_ll(x, p, y, w, &trial);
            if ll_try >= ll - 1e-12 {
                let gain = ll_try - ll;
                beta = trial;
                ll = ll_try;
                accepted = gain > 1e-13;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // Pinned (typically at the cap under separation) or fully stalled.
            break;
        }
    }
    if !converged {
        converged = {
            // Recompute the gradient at the final point.
            let mut g = vec![0.0; p];
            for i in 0..n {
                if w[i] == 0.0 {
                    continue;
                }
                let row = &x[i * p..(i + 1) * p];
                let mut eta = 0.0;
                for j in 0..p {
                    eta += row[j] * beta[j];
                }
                let pr = logistic(eta);
                for j in 0..p {
                    g[j] += w[i] * (y[i] - pr) * row[j];
                }
            }
            g.iter().all(|g| g.abs() <= opts.grad_tol)
        };
    }
    // Separation: a coefficient at the cap, or every active observation
    // perfectly predicted (fitted probability numerically 0 or 1 on the
    // correct side) — the latter catches cases like an all-zero response
    // where the gradient vanishes long before any coefficient reaches the cap.
    let mut any_active = false;
    let mut perfectly_predicted = true;
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        any_active = true;
        let row = &x[i * p..(i + 1) * p];
        let mut eta = 0.0;
        for j in 0..p {
            eta += row[j] * beta[j];
        }
        let pr = logistic(eta);
        let fits = if y[i] >= 0.5 {
            pr >= 1.0 - 1e-6
        } else {
            pr <= 1e-6
        };
        if !fits {
            perfectly_predicted = false;
            break;
        }
    }
    let separation =
        beta.iter().any(|b| b.abs() >= cap - 1e-9) || (any_active && perfectly_predicted);
    Ok(LogisticFit {
        coefficients: beta,
        log_likelihood: ll,
        iterations,
        converged,
        separation,
    })
}

/// Inverse Fisher information `(X' W X)^-1` of a logistic fit at `beta`,
/// with `W = diag(w_i p_i (1 - p_i))`. Square roots of the diagonal are the
/// usual asymptotic standard errors.
pub fn logistic_covariance(x: &[f64], p: usize, w: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    let n = w.len();
    let mut info = vec![0.0; p * p];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let row = &x[i * p..(i + 1) * p];
        let mut eta = 0.0;
        for j in 0..p {
            eta += row[j] * beta[j];
        }
        let pr = logistic(eta);
        let v = w[i] * pr * (1.0 - pr);
        for j in 0..p {
            for l in 0..p {
                info[j * p + l] += v * row[j] * row[l];
            }
        }
    }
    invert(&info, p).map_err(|_| HmmError::SingularMatrix {
        context: "logistic Fisher information".into(),
    })
}

/// Result of a multinomial-logit fit.
#[derive(Debug, Clone)]
pub struct MultinomialFit {
    /// `(n_categories - 1) x p` row-major; category 0 is the fixed reference.
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
}

/// Weighted multinomial log-likelihood `sum_i sum_k w_ik ln p_ik`.
fn multinomial_ll(
    x: &[f64],
    p: usize,
    w: &[f64],
    k: usize,
    theta: &[f64],
    probs: &mut [f64],
) -> f64 {
    let n = w.len() / k;
    let mut ll = 0.0;
    for i in 0..n {
        softmax_row(&x[i * p..(i + 1) * p], theta, p, k, probs);
        for c in 0..k {
            let wc = w[i * k + c];
            if wc != 0.0 {
                ll += wc * clamp_prob(probs[c]).ln();
            }
        }
    }
    ll
}

fn softmax_row(row: &[f64], theta: &[f64], p: usize, k: usize, out: &mut [f64]) {
    out[0] = 0.0;
    let mut max = 0.0f64;
    for c in 1..k {
        let t = &theta[(c - 1) * p..c * p];
        let mut eta = 0.0;
        for j in 0..p {
            eta += t[j] * row[j];
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

/// Maximize the weighted multinomial-logit log-likelihood over coefficients
/// for categories `1..k` (category 0 fixed at zero), by ridge-damped Newton
/// with step halving.
///
/// * `x`: n x p row-major design (intercept column included by the caller).
/// * `w`: n x k row-major nonnegative weights (posterior soft counts).
///
/// With `p == 1` (intercept only) the maximizer is the weighted category
/// proportions; that closed form is returned directly.
pub fn multinomial_newton(
    x: &[f64],
    p: usize,
    w: &[f64],
    k: usize,
    start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<MultinomialFit> {
    if k == 0 || p == 0 {
        return Err(HmmError::InvalidData(
            "multinomial fit needs k >= 1 categories and p >= 1 columns".into(),
        ));
    }
    if w.len() % k != 0 || x.len() / p != w.len() / k {
        return Err(HmmError::InvalidData(format!(
            "multinomial design shape mismatch: x = {}, p = {p}, w = {}, k = {k}",
            x.len(),
            w.len()
        )));
    }
    let n = w.len() / k;
    let dim = (k - 1) * p;
    let mut probs = vec![0.0; k];

    if dim == 0 {
        // Single category: nothing to estimate.
        return Ok(MultinomialFit {
            coefficients: vec![],
            log_likelihood: 0.0,
            iterations: 0,
            converged: true,
            separation: false,
        });
    }

    if p == 1 {
        // Closed form: weighted proportions, clamped, re-expressed as logits.
        let mut totals = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                totals[c] += w[i * k + c];
            }
        }
        let grand: f64 = totals.iter().sum();
        if grand <= 0.0 {
            return Err(HmmError::InvalidData(
                "multinomial fit has zero total weight".into(),
            ));
        }
        let base = clamp_prob(totals[0] / grand).ln();
        let theta: Vec<f64> = totals[1..]
            .iter()
            .map(|t| clamp_prob(t / grand).ln() - base)
            .collect();
        let ll = multinomial_ll(x, p, w, k, &theta, &mut probs);
        return Ok(MultinomialFit {
            coefficients: theta,
            log_likelihood: ll,
            iterations: 0,
            converged: true,
            separation: false,
        });
    }

    let cap = opts.coef_cap;
    let mut theta: Vec<f64> = match start {
        Some(t) => {
            debug_assert_eq!(t.len(), dim);
            t.iter().map(|v| v.clamp(-cap, cap)).collect()
        }
        None => vec![0.0; dim],
    };
    let mut ll = multinomial_ll(x, p, w, k, &theta, &mut probs);
    let mut grad = vec![0.0; dim];
    let mut hess = vec![0.0; dim * dim];
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..opts.max_iter {
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.iter_mut().for_each(|h| *h = 0.0);
        for i in 0..n {
            let row = &x[i * p..(i + 1) * p];
            softmax_row(row, &theta, p, k, &mut probs);
            let wrow = &w[i * k..(i + 1) * k];
            let total: f64 = wrow.iter().sum();
            if total == 0.0 {
                continue;
            }
            for a in 1..k {
                let ra = wrow[a] - total * probs[a];
                for j in 0..p {
                    grad[(a - 1) * p + j] += ra * row[j];
                }
                for b in a..k {
                    // d2 ll / d theta_a d theta_b = -total * p_a (delta_ab - p_b) x x'
                    let v = total * probs[a] * (if a == b { 1.0 - probs[b] } else { -probs[b] });
                    if a == b {
                        // Diagonal block: store the upper triangle once.
                        for j in 0..p {
                            for l in j..p {
                                let r = (a - 1) * p + j;
                                hess[r * dim + (a - 1) * p + l] += v * row[j] * row[l];
                            }
                        }
                    } else {
                        // b > a, so every (r, c) lands in the upper triangle.
                        for j in 0..p {
                            for l in 0..p {
                                let r = (a - 1) * p + j;
                                let c = (b - 1) * p + l;
                                hess[r * dim + c] += v * row[j] * row[l];
                            }
                        }
                    }
                }
            }
        }
        for r in 0..dim {
            for c in 0..r {
                hess[r * dim + c] = hess[c * dim + r];
            }
            hess[r * dim + r] += opts.ridge;
        }
        if grad.iter().all(|g| g.abs() <= opts.grad_tol) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut dir = grad.clone();
        cholesky_solve(&mut hess, &mut dir).map_err(|_| HmmError::SingularMatrix {
            context: "multinomial normal equations".into(),
        })?;

        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..45 {
            let trial: Vec<f64> = theta
                .iter()
                .zip(&dir)
                .map(|(t, d)| (t + scale * d).clamp(-cap, cap))
                .collect();
            let ll_try = multinomial_ll(x, p, w, k, &trial, &mut probs);
            if ll_try >= ll - 1e-12 {
                let gain = ll_try - ll;
                theta = trial;
                ll = ll_try;
                accepted = gain > 1e-13;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !converged {
        // One last gradient check at the exit point.
        let mut ok = true;
        let mut g = vec![0.0; dim];
        for i in 0..n {
            let row = &x[i * p..(i + 1) * p];
            softmax_row(row, &theta, p, k, &mut probs);
            let wrow = &w[i * k..(i + 1) * k];
            let total: f64 = wrow.iter().sum();
            for a in 1..k {
                for j in 0..p {
                    g[(a - 1) * p + j] += (wrow[a] - total * probs[a]) * row[j];
                }
            }
        }
        for v in &g {
            if v.abs() > opts.grad_tol {
                ok = false;
                break;
            }
        }
        converged = ok;
    }
    let separation = theta.iter().any(|t| t.abs() >= cap - 1e-9);
    Ok(MultinomialFit {
        coefficients: theta,
        log_likelihood: ll,
        iterations,
        converged,
        separation,
    })
}
