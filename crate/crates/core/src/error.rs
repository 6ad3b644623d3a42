use thiserror::Error;

/// Errors raised by the assignment, regularization, equilibrium and
/// simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ApexError {
    #[error("utility matrix is not square: expected {expected} entries, got {got}")]
    NotSquare { expected: usize, got: usize },

    #[error("utility matrix must have at least one row")]
    Empty,

    #[error("invalid utility u[{row}][{col}] = {value}: entries must be finite and non-negative")]
    InvalidUtility { row: usize, col: usize, value: f64 },

    #[error("invalid weight lambda[{index}] = {value}")]
    InvalidWeight { index: usize, value: f64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error(
        "utility row {row} is not normalized (min {min}, max {max}); expected min 0 and max 1"
    )]
    NotNormalized { row: usize, min: f64, max: f64 },

    #[error("capacity vector is invalid: {0}")]
    InvalidCapacity(String),

    #[error("allocation is not bi-stochastic: {0}")]
    NotBistochastic(String),

    #[error(
        "support of the residual allocation has no perfect matching (residual mass {residual:e})"
    )]
    NoPerfectMatching { residual: f64 },

    #[error("{what} did not converge: residual {residual:e} after {iterations} iterations")]
    NoConvergence {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no unit bundle is affordable: cheapest item costs {min_price} > budget {budget}")]
    Unaffordable { min_price: f64, budget: f64 },

    #[error("linear system is singular: {0}")]
    Singular(&'static str),

    #[error("index {index} out of range (len {len}) for {what}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    #[error("{0}")]
    Unsupported(String),

    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, ApexError>;
