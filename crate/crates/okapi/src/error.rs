//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Bad magic, version, header, or row arity in an on-disk file.
    #[error("format error: {0}")]
    Format(String),

    /// Structurally well-formed input violating a domain invariant
    /// (NaN embedding, duplicate id, domain out of range, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Vector with norm at or below 1e-30; cannot be normalized.
    #[error("degenerate vector: norm {norm} is at or below 1e-30")]
    DegenerateVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Propensity score arities disagree between queries and keys.
    #[error("propensity arity mismatch: expected {expected}, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    #[error("empty input")]
    EmptyInput,

    /// Offline propensity fit requires at least two domains present.
    #[error("single domain present; propensity fit needs at least two")]
    SingleDomain,

    /// Std-caliper threshold needs at least two scores.
    #[error("too few scores: got {got}, need at least 2")]
    TooFewScores { got: usize },

    #[error("empty covariate set")]
    EmptySet,

    /// Fewer than two samples in a set; variances are undefined.
    #[error("too few samples for a variance: got {got}, need at least 2")]
    TooFewSamples { got: usize },

    /// Pooled standard deviation is zero while the means differ.
    #[error("zero variance in dimension {dim}; SMD undefined")]
    ZeroVariance { dim: usize },

    #[error("no retained matches")]
    NoMatches,

    #[error("grid empty after retention filter")]
    EmptyGridAfterFilter,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("batch of {batch} exceeds bank capacity {capacity}")]
    BatchLargerThanBank { batch: usize, capacity: usize },

    #[error("config error: {0}")]
    Config(String),
}
