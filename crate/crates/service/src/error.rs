use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServiceError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` is not running")]
    SessionNotRunning(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("malformed message: {0}")]
    Protocol(String),
}

impl ServiceError {
    /// Stable identifier sent to clients.
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnknownScenario(_) => "UnknownScenario",
            Self::UnknownSession(_) => "UnknownSession",
            Self::SessionNotRunning(_) => "SessionNotRunning",
            Self::InvalidValue(_) => "InvalidValue",
            Self::Protocol(_) => "Protocol",
        }
    }
}

impl From<anmpc::Error> for ServiceError {
    fn from(e: anmpc::Error) -> Self {
        Self::InvalidValue(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;
