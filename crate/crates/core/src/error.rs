use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("non-finite input in {0}")]
    NonFinite(&'static str),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("degenerate distribution: all weights are zero")]
    DegenerateDistribution,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index out of range: {what} = {index} (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("did not converge after {iterations} iterations (last change {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("policy is on the simplex boundary; exact gradient needs an interior policy")]
    BoundaryPolicy,

    #[error("finite-difference step leaves the simplex")]
    StepSize,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("outside supported scope: {0}")]
    Scope(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
