use thiserror::Error;

/// Errors raised by geometry evaluation, one-step maps and the Monte Carlo driver.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// The Gram matrix (or a Newton Jacobian built from it) could not be factorized.
    #[error("singular Gram matrix (pivot {pivot:e})")]
    SingularGram { pivot: f64 },

    /// Newton and the damped fixed-point fallback both failed to reach the target constraint value.
    #[error("projection failed after {iterations} iterations (residual {residual:e}, tolerance {tolerance:e})")]
    ProjectionFailure {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    /// A trajectory step failed; wraps the step index and the underlying cause.
    #[error("step {step} of trajectory {trajectory}: {source}")]
    TrajectoryStep {
        trajectory: u64,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{failed} of {total} trajectories failed or diverged (limit {limit})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: usize,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
