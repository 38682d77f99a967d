use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Invalid configuration or inconsistent inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// Cholesky factorization failed even after the maximal diagonal jitter.
    #[error("covariance factorization failed at leading minor {leading_minor} (jitter {jitter:e})")]
    Factorization { leading_minor: usize, jitter: f64 },

    /// A numerical procedure produced a non-finite or otherwise unusable value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of numerical routines (as opposed to bad inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Factorization { .. } | Error::Numerical(_))
    }
}
