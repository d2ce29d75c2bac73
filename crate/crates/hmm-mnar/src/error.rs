//! Error type shared across the crate.

use thiserror::Error;

/// Everything that can go wrong when building models, running inference, or
/// fitting. Warnings (e.g. out-of-range responses, IRLS separation) are *not*
/// errors; they travel on result structs instead.
#[derive(Debug, Error)]
pub enum HmmError {
    /// A model references a covariate that the dataset schema does not carry.
    #[error("covariate `{0}` not found in dataset schema")]
    CovariateNotFound(String),

    /// Model shape or parameter values are invalid (counts disagree, non-finite
    /// values, sd <= 0, probabilities outside the simplex, ...).
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Dataset construction rejected the input (empty series, non-contiguous
    /// time indices, non-finite values, covariate count mismatch, ...).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Every state's weight vanished at some step of the forward pass, so the
    /// likelihood underflowed to exactly zero.
    #[error("likelihood underflowed to zero at step {step} of series `{series}`")]
    NumericalDegeneracy { series: String, step: usize },

    /// A state lost all posterior weight, leaving its M-step undefined.
    #[error("state {state} has (near-)zero posterior weight; M-step undefined")]
    DegenerateState { state: usize },

    /// A linear solve hit a singular (or numerically rank-deficient) matrix.
    #[error("singular matrix in {context}")]
    SingularMatrix { context: String },

    /// The observed information matrix could not be inverted, so no standard
    /// errors exist. Lists the parameter at the failing pivot.
    #[error("observed information is singular near parameter `{parameter}`")]
    SingularInformation { parameter: String },

    /// Exhaustive path enumeration was asked to visit more than the supported
    /// number of paths.
    #[error("path space too large for enumeration: {states}^{steps} exceeds {limit}")]
    CapacityExceeded {
        states: usize,
        steps: usize,
        limit: u64,
    },

    /// A constraint request does not apply to the model at hand.
    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),

    /// Models passed to the likelihood-ratio test are not nested.
    #[error("models are not nested: {0}")]
    NestingViolation(String),

    /// Every start of a multi-start fit failed.
    #[error("all {attempts} fit attempts failed; first error: {first}")]
    AllStartsFailed { attempts: usize, first: String },

    /// Text input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Two rows claim the same (subject, time) cell.
    #[error("duplicate record for subject `{subject}` at time {time}")]
    DuplicateRecord { subject: String, time: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HmmError> = std::result::Result<T, E>;
