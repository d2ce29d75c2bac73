//! Shared generators for the integration suites: random models and series
//! spanning the three missingness regimes, plus an exhaustive path scorer
//! that serves as the decoding oracle.

use hmm_mnar::inference::{emission_weight, initial_probs, transition_matrix};
use hmm_mnar::{
    GaussianEmission, HmmModel, MissingnessModel, MultinomialLogit, Record, Schema, TimeSeries,
};
use rand::Rng;
use rand_distr::StandardNormal;

/// Which missingness submodel a random model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Ignorable,
    StateBernoulli,
    StateLogistic,
}

pub const REGIMES: [Regime; 3] = [
    Regime::Ignorable,
    Regime::StateBernoulli,
    Regime::StateLogistic,
];

/// A random point on the probability simplex (all entries positive).
fn simplex<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Random model over `k` states. `chain_covariate` puts one covariate on the
/// initial and transition logits; `Regime::StateLogistic` uses one covariate
/// on the missingness logit. `equal_missingness` replicates a single
/// missingness row across states (the MAR-equivalent configuration).
pub fn random_model<R: Rng>(
    rng: &mut R,
    k: usize,
    regime: Regime,
    chain_covariate: bool,
    equal_missingness: bool,
) -> (HmmModel, Schema) {
    let schema = Schema::new(["x"]).unwrap();
    let emissions: Vec<GaussianEmission> = (0..k)
        .map(|_| {
            let mean = 2.0 * rng.sample::<f64, _>(StandardNormal);
            GaussianEmission::new(mean, rng.gen_range(0.3..2.0))
        })
        .collect();
    let (initial, transitions) = if chain_covariate {
        let coef = |rng: &mut R| -> Vec<f64> {
            (0..(k - 1) * 2)
                .map(|_| 0.8 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let initial = MultinomialLogit::new(k, 1, coef(rng)).unwrap();
        let transitions = (0..k)
            .map(|_| MultinomialLogit::new(k, 1, coef(rng)).unwrap())
            .collect::<Vec<_>>();
        (initial, transitions)
    } else {
        let initial = MultinomialLogit::from_probs(&simplex(rng, k)).unwrap();
        let transitions = (0..k)
            .map(|_| MultinomialLogit::from_probs(&simplex(rng, k)).unwrap())
            .collect::<Vec<_>>();
        (initial, transitions)
    };
    let (missingness, miss_cov) = match regime {
        Regime::Ignorable => (MissingnessModel::Ignorable, Vec::new()),
        Regime::StateBernoulli => {
            let shared = rng.gen_range(0.05..0.6);
            let phi = (0..k)
                .map(|_| {
                    if equal_missingness {
                        shared
                    } else {
                        rng.gen_range(0.05..0.6)
                    }
                })
                .collect();
            (MissingnessModel::StateBernoulli { phi }, Vec::new())
        }
        Regime::StateLogistic => {
            let row = |rng: &mut R| -> Vec<f64> {
                vec![
                    rng.gen_range(-1.5..0.5),
                    rng.sample::<f64, _>(StandardNormal),
                ]
            };
            let shared = row(rng);
            let coefficients = (0..k)
                .map(|_| {
                    if equal_missingness {
                        shared.clone()
                    } else {
                        row(rng)
                    }
                })
                .collect();
            (
                MissingnessModel::StateLogistic { coefficients },
                vec!["x".to_string()],
            )
        }
    };
    let chain_cov = if chain_covariate {
        vec!["x".to_string()]
    } else {
        Vec::new()
    };
    let model = HmmModel::new(
        k,
        initial,
        transitions,
        emissions,
        missingness,
        chain_cov.clone(),
        chain_cov,
        miss_cov,
    )
    .unwrap();
    (model, schema)
}

/// Random series of length `t_len` with one covariate column and roughly
/// `missing_rate` of its responses missing (never all of them when
/// `t_len > 1`).
pub fn random_series<R: Rng>(rng: &mut R, id: &str, t_len: usize, missing_rate: f64) -> TimeSeries {
    let mut records = Vec::with_capacity(t_len);
    let forced_observed = rng.gen_range(0..t_len);
    for t in 0..t_len {
        let covs = vec![rng.gen_range(-1.0..1.0)];
        if t != forced_observed && rng.gen::<f64>() < missing_rate {
            records.push(Record::missing(t as u32 + 1, covs));
        } else {
            let y = 2.0 * rng.sample::<f64, _>(StandardNormal);
            records.push(Record::observed(t as u32 + 1, y, covs));
        }
    }
    TimeSeries::new(id, records)
}

/// Joint log-probability of `path` and the series data under `model`,
/// computed directly from the public per-record quantities (no dynamic
/// programming).
pub fn path_log_score(
    model: &HmmModel,
    schema: &Schema,
    series: &TimeSeries,
    path: &[usize],
) -> f64 {
    let k = model.n_states;
    let recs = &series.records;
    let mut lp = initial_probs(model, schema, &recs[0]).unwrap()[path[0]].ln()
        + emission_weight(model, schema, path[0], &recs[0])
            .unwrap()
            .ln();
    for t in 1..path.len() {
        let a = transition_matrix(model, schema, &recs[t - 1]).unwrap();
        lp += a[path[t - 1] * k + path[t]].ln()
            + emission_weight(model, schema, path[t], &recs[t])
                .unwrap()
                .ln();
    }
    lp
}

/// Exhaustive search over all `K^T` paths: returns the best path (first in
/// lexicographic order among ties), its log score, and the runner-up score
/// (the best among all other paths; `-inf` when only one path exists).
pub fn best_path_exhaustive(
    model: &HmmModel,
    schema: &Schema,
    series: &TimeSeries,
) -> (Vec<usize>, f64, f64) {
    let k = model.n_states;
    let t_len = series.len();
    let mut path = vec![0usize; t_len];
    let mut best_path = path.clone();
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    loop {
        let lp = path_log_score(model, schema, series, &path);
        if lp > best {
            second = best;
            best = lp;
            best_path.copy_from_slice(&path);
        } else if lp > second {
            second = lp;
        }
        // Odometer over paths, last position fastest.
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
    (best_path, best, second)
}
