//! Gaussian hidden Markov models for time series with missing data.
//!
//! The observation at each timepoint is a pair (y, m): a real response y
//! and a missingness indicator m, with y absent exactly when m = 1. Three
//! treatments of the indicator are supported, selected per model:
//!
//! * **Ignorable** — missing records contribute emission weight 1, which
//!   marginalizes the response exactly; the indicator itself is not
//!   modeled (a MAR analysis).
//! * **State-dependent Bernoulli** — each state k has a rate
//!   p(m = 1 | S = k) = phi_k, and both y and m inform the state (an
//!   MNAR model).
//! * **State-dependent logistic** — the missingness rate is a logistic
//!   function of per-record covariates with state-specific coefficients,
//!   e.g. a time trend for attrition.
//!
//! Initial and transition distributions are multinomial-logit functions of
//! per-record covariates (constants when no covariates are named), so the
//! same machinery covers homogeneous chains and covariate-dependent ones.
//!
//! Likelihoods come from the scaled forward-backward recursion; estimation
//! is EM with exact M-steps where they exist and warm-started Newton
//! solvers where they do not; decoding is Viterbi. The [`simulate`] module
//! adds generative scenarios, Monte-Carlo study aggregation, and oracle
//! classification bounds; [`select`] adds information criteria,
//! likelihood-ratio tests, and Wald intervals; [`dataio`] ingests
//! long-format longitudinal files and runs missingness diagnostics.
//!
//! States are 0-based everywhere in this API. Anything user-facing (CLI
//! output, CSV files) numbers states from 1.

pub mod dataio;
pub mod error;
pub mod estimate;
pub mod glm;
pub mod inference;
mod linalg;
pub mod model;
pub mod params;
pub mod select;
pub mod simulate;
pub mod special;

pub use error::{HmmError, Result};
pub use estimate::{em_fit, multi_start_fit, FitConfig, FitResult};
pub use inference::{forward_backward, log_likelihood, viterbi, Posteriors};
pub use model::{
    Dataset, GaussianEmission, HmmModel, MissingnessConstraint, MissingnessModel, MultinomialLogit,
    Record, Schema, TimeSeries,
};
