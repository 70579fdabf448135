use s2st_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Signal(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Format(String),

    #[error("{0}")]
    Eval(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

impl Error {
    /// Short machine-readable category, used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Numerics(_) => "numerics",
            Error::Config(_) => "config",
            Error::Signal(_) => "signal",
            Error::Data(_) => "data",
            Error::Format(_) => "format",
            Error::Eval(_) => "eval",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) | Error::Wav(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<Error> for NumericsError {
    /// Lets model blocks run inside numerics-level closures such as gradient checks.
    fn from(e: Error) -> Self {
        match e {
            Error::Numerics(n) => n,
            other => NumericsError::Invalid { op: "block", detail: other.to_string() },
        }
    }
}
