use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Reference spec cannot be realized (non-positive bound, non-finite value).
    #[error("infeasible reference: {0}")]
    InfeasibleReference(String),

    /// Lifted regressor violates the full-rank assumption.
    #[error("rank-deficient regressor: min singular value {min_sigma:.3e} below tolerance {tolerance:.3e}{}", source_id.map(|j| format!(" (entry {j})")).unwrap_or_default())]
    RankDeficient {
        min_sigma: f64,
        tolerance: f64,
        source_id: Option<usize>,
    },

    /// Implicit integration step failed to reach its residual tolerance.
    #[error("implicit step {step} did not converge after {iterations} iterations (residual {residual:.3e})")]
    StepNonconvergence {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    /// A loss, gradient, or state became NaN/inf.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Mismatched dimensions between coupled objects.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed on-disk artifact.
    #[error("malformed file {path}: {detail}")]
    Malformed { path: String, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
