use thiserror::Error;

/// Errors produced by the path space, solver and verification layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("forward simulation diverged at node {node} (path {path})")]
    Diverged { node: usize, path: usize },

    #[error("singular regression (non-finite or rank-deficient normal equations)")]
    SingularRegression,

    #[error("Picard iteration failed to converge after {iters} sweeps (last distance {last:.3e})")]
    NoConvergence {
        iters: usize,
        last: f64,
        history: Vec<f64>,
    },

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("functional evaluation failed: {0}")]
    Evaluation(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
