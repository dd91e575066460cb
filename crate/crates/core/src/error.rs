use thiserror::Error;

/// Errors raised by the numerical routines and the file readers.
#[derive(Debug, Error)]
pub enum Error {
    /// Neither the even-degree nor the cone-invariance hypothesis holds, so
    /// the closed-form p-radius does not apply.
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    /// A dense Kronecker power would exceed the configured side length.
    #[error("dimension cap exceeded: side {side} > cap {cap}; use the symmetric lift instead")]
    DimensionCap { side: usize, cap: usize },

    #[error("eigensolver failed: {0}")]
    EigensolverFailure(String),

    /// The requested growth rate does not dominate the p-radius.
    #[error("gamma too small: {0}")]
    GammaTooSmall(String),

    #[error("enumeration budget exceeded: {needed} products needed, budget {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Malformed input: bad dimensions, probabilities, or file fields.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("internal consistency check failed: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Process exit code for the CLI: 1 for input errors, 2 for assumption
    /// or convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_) | Error::Io(_) | Error::Json(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
