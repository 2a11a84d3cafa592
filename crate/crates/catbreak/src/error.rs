//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by catbreak operations.
#[derive(Debug, Error)]
pub enum Error {
    /// An edit violates its kind's precondition (insert on a present
    /// feature, substitute to the current value, out-of-range value, ...).
    #[error("invalid edit: {0}")]
    InvalidEdit(String),

    /// A perturbation lists the same feature more than once.
    #[error("duplicate feature {0} in perturbation")]
    DuplicateFeature(usize),

    /// Two objects that must share a shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// An argument is out of its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A UCB score was requested for an arm with zero pulls.
    #[error("arm {0} has never been pulled")]
    UnpulledArm(usize),

    /// The regret bound requires alpha > 2.
    #[error("alpha must be > 2 for the regret bound, got {0}")]
    InvalidAlpha(f64),

    /// The regret bound requires strictly positive gaps.
    #[error("regret gap must be > 0, got {0}")]
    InvalidGap(f64),

    /// A gradient-based operation was invoked on a black-box classifier.
    #[error("operation requires a white-box classifier")]
    BlackBoxModel,

    /// A feature has no admissible alternative value to evaluate.
    #[error("feature {0} has no admissible alternative values")]
    NoAlternatives(usize),

    /// A subset enumeration exceeded its configured cap.
    #[error("subset enumeration size {size} exceeds cap {cap}")]
    CapExceeded { size: u128, cap: u128 },

    /// The exhaustive search space exceeds the evaluation guard.
    #[error("exhaustive search would need {0} evaluations (guard: {1})")]
    TooLarge(u128, u128),

    /// An analysis was requested over an empty dataset.
    #[error("dataset is empty")]
    EmptyDataset,

    /// A file does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
