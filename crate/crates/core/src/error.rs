use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A coefficient left its admissible range (e.g. volatility below the floor).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// The numerical scheme produced an unusable state.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A least-squares regression step could not be solved.
    #[error("regression error: {0}")]
    Regression(String),

    /// An iterative solver exhausted its iteration budget.
    #[error("no convergence after {iterations} iterations (last change {last_change:.3e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
