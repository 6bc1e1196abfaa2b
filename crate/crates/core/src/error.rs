use thiserror::Error;

/// Errors raised by the modeling and solving layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("branch-and-bound budget of {nodes} nodes exceeded (bounds [{lower}, {upper}])")]
    BudgetExceeded { nodes: usize, lower: f64, upper: f64 },
    #[error("unsupported dimension {0} (at most 20 supported)")]
    UnsupportedDimension(usize),
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} contains non-finite values")))
    }
}
