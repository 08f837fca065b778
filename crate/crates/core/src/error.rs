use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("evaluator failure at x = {x} ({what})")]
    EvaluatorFailure { what: &'static str, x: f64 },

    #[error("non-finite coefficient at step {step} (value {value})")]
    NonFinite { step: usize, value: f64 },

    #[error("hitting condition violated near {endpoint}")]
    HittingConditionViolated { endpoint: f64 },

    #[error("excursion area infinite")]
    ExcursionAreaInfinite,

    #[error("indeterminate near boundary: area {area} with quadrature error {error}")]
    Indeterminate { area: f64, error: f64 },

    #[error("precondition violated at t = {t}: {reason}")]
    Precondition { t: f64, reason: String },

    #[error("invalid functional: {0}")]
    InvalidFunctional(String),

    #[error("stream reconstruction mismatch: {0}")]
    StreamMismatch(String),

    #[error("{0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
