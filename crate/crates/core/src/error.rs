use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("enumeration budget exceeded: {size} configurations > {budget}")]
    EnumerationBudget { size: f64, budget: f64 },
    #[error("operation not supported for {model}: {what}")]
    Unsupported { model: &'static str, what: String },
    #[error("matrix is not symmetric positive definite ({0})")]
    NotSpd(String),
    #[error("Newton iteration failed after maximal damping: {0}")]
    NewtonFailure(String),
    #[error("inner optimization did not converge: {0}")]
    InnerNonConvergence(String),
    #[error("grid too coarse: boundary mass {mass:.3e} exceeds {limit:.1e}")]
    GridTooCoarse { mass: f64, limit: f64 },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("insufficient data for check: {0}")]
    Insufficient(String),
    #[error("Monte Carlo error too large: {0}")]
    MonteCarloError(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("objective decreased from {before} to {after} in {context}")]
    NonMonotone { context: String, before: f64, after: f64 },
}

impl Error {
    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
