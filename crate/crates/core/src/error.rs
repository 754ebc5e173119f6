use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    /// A quadrature ran out of budget before meeting its tolerance. The
    /// partial estimate is kept so callers can decide whether it is usable.
    #[error(
        "quadrature did not converge: estimate {estimate:e} with error bound {error_bound:e} \
         after {evaluations} evaluations"
    )]
    Convergence {
        estimate: f64,
        error_bound: f64,
        evaluations: usize,
    },

    #[error("invalid value for `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error(
        "circulant embedding is not positive semidefinite (min eigenvalue {min_eigenvalue:e}); \
         use the spectral-truncation method instead"
    )]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("non-finite field values at step {step}")]
    BlowUp { step: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("stored increments need {required} bytes, budget is {budget} bytes")]
    MemoryBudget { required: usize, budget: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("cannot merge partial reports: {0}")]
    Merge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Config(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
