use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Component or mode index outside the configured range.
    #[error("index {index} out of range (size {size})")]
    IndexOutOfRange { index: usize, size: usize },

    /// A time that must lie on the integration grid does not.
    #[error("time {time} is not aligned with the grid step {step}")]
    MisalignedTime { time: f64, step: f64 },

    /// Argument outside its mathematical domain (negative duration,
    /// evaluation point outside the history window, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Mismatched discretizations (mode counts, history grids, delays).
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A parameter constraint was violated. `constraint` names the
    /// inequality that failed, `detail` carries the numbers.
    #[error("invalid configuration: {constraint} violated ({detail})")]
    InvalidConfig { constraint: String, detail: String },

    /// Observation window too short for the requested diagnostic.
    #[error("window too short: {0}")]
    WindowTooShort(String),

    /// An iterative estimate did not converge to the requested tolerance.
    #[error("not converged: {0}")]
    NotConverged(String),

    /// A tangent frame lost orthonormality beyond tolerance.
    #[error("frame not orthonormal: gram deviation {deviation:.3e}")]
    NonOrthonormalFrame { deviation: f64 },

    /// Set-valued operation applied to an empty set.
    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid_config(constraint: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidConfig {
            constraint: constraint.into(),
            detail: detail.into(),
        }
    }
}
