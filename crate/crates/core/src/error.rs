use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Evaluation point sits on a log-barrier singularity.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("every grid cell is outside the value-function domain")]
    DegenerateDistribution,

    #[error("stationarity jacobian is ill-conditioned (condition number {condition:.3e})")]
    SingularJacobian { condition: f64 },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error in `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("trace is empty")]
    EmptyTrace,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
