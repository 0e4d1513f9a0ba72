use thiserror::Error;

/// Errors produced by the `ldlc` library.
#[derive(Debug, Error)]
pub enum LdlcError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid matrix structure: {0}")]
    Structure(String),

    #[error("matrix is singular")]
    Singular,

    #[error("dimension {n} exceeds the dense algebra cap of {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("loop removal exhausted its budget of {budget} swaps ({remaining} loops remaining)")]
    SwapBudgetExhausted { budget: u64, remaining: usize },

    #[error("pdf grids do not match: {0}")]
    GridMismatch(String),

    #[error("pdf has zero mass")]
    ZeroMass,

    #[error("jacobi iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("jacobi iteration diverged at iteration {iteration} (residual {residual:e})")]
    Diverged { iteration: usize, residual: f64 },

    #[error("enumeration budget exceeded: {points} points > {budget}")]
    BudgetExceeded { points: f64, budget: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, LdlcError>;
