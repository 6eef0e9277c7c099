use thiserror::Error;

/// Errors raised by the laboratory's numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite drift value at step {step}")]
    NonFiniteDrift { step: usize },

    #[error("grid is missing breakpoints {missing:?}")]
    MissingBreakpoints { missing: Vec<f64> },

    #[error("time point {0} does not lie on the grid")]
    OffGrid(f64),

    #[error("normal equations are rank deficient at step {step}; use a ridge parameter > 0")]
    RankDeficient { step: usize },

    #[error(
        "sinkhorn did not converge within {iterations} iterations \
         (marginal violation {violation:.3e}, target {target:.1e})"
    )]
    SinkhornNonConvergence {
        iterations: usize,
        violation: f64,
        target: f64,
    },

    #[error("fixed-point iteration diverged; change trace {trace:?}")]
    Divergence { trace: Vec<f64> },

    #[error("quadrature over {0} Gaussian coordinates is not supported (at most 2)")]
    QuadratureDimension(usize),

    #[error("unknown {what} `{name}`; available: {}", available.join(", "))]
    Unknown {
        what: &'static str,
        name: String,
        available: Vec<String>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed path file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
