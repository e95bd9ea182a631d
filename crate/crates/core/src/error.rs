use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("overflow: {0}")]
    Overflow(String),

    #[error("degenerate rotation parameters: {0}")]
    DegenerateRotation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("divergence detected: {0}")]
    DivergenceDetected(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-greppable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::RankDeficient(_) => "RankDeficient",
            Error::NotPositiveDefinite(_) => "NotPositiveDefinite",
            Error::Overflow(_) => "Overflow",
            Error::DegenerateRotation(_) => "DegenerateRotation",
            Error::Config(_) => "ConfigError",
            Error::DivergenceDetected(_) => "DivergenceDetected",
            Error::Format(_) => "FormatError",
            Error::Io(_) => "IoError",
        }
    }
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
