use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("symmetric system is numerically singular (n = {n})")]
    SingularSystem { n: usize },

    #[error("correlation matrix could not be floored to positive definite")]
    NonPositiveB,

    #[error("every row has been pruned; correlation matrix undefined")]
    NoActiveRows,

    #[error("reference signal has zero energy")]
    DegenerateReference,

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error("unknown algorithm id `{0}`")]
    UnknownAlgorithm(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("format error: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
