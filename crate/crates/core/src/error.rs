use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("volatility matrix is rank deficient at t={t}")]
    RankDeficient { t: f64 },
    #[error("control is not admissible: |sigma * phi| = {residual:e} at step {step}")]
    NotAdmissible { step: usize, residual: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("claim {claim} is incompatible: {reason}")]
    Incompatible { claim: String, reason: String },
    #[error("regression failed: {0}")]
    Regression(String),
    #[error("overflow in exponential moment: {0}")]
    Overflow(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("tree too large: {0} evaluations")]
    TreeTooLarge(f64),
    #[error("optimizer hit the control bound: {0}")]
    BoundaryOptimum(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
