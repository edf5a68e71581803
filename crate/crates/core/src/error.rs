use thiserror::Error;

/// Errors raised by the toolkit.
///
/// The variants map onto the failure classes used throughout the crate:
/// configuration problems (bad dimensions, bad gains, bad files), numeric
/// problems (non-finite values), violated runtime invariants, structural
/// degeneracies (rank-deficient inputs, indefinite metrics), infeasible
/// pointwise controllers, failed metric synthesis, violated preconditions,
/// and trajectory divergence.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: non-finite value in {what} at component {index}")]
    NonFinite { what: String, index: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("pointwise controller infeasible: {0}")]
    Infeasible(String),

    #[error("metric synthesis failed: {0}")]
    Synthesis(String),

    #[error("certificate validation failed: {0}")]
    Validation(String),

    #[error("precondition not met: {0}")]
    Precondition(String),

    #[error("trajectory diverged at t = {t}: state norm {norm:.3e}")]
    Divergence { t: f64, norm: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Checks that a vector-valued quantity is finite, naming the first
    /// offending component otherwise.
    pub fn check_finite(what: &str, values: &[f64]) -> Result<()> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: what.to_string(),
                    index: i,
                });
            }
        }
        Ok(())
    }
}
