use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("prox gradient undefined at boundary point (coordinate {index} = {value})")]
    GradientUndefined { index: usize, value: f64 },

    #[error("invalid gradient: {0}")]
    InvalidGradient(String),

    #[error("query point lies outside the mu0-neighbourhood of the domain (distance {distance:.3e} > {mu0:.3e})")]
    DomainViolation { distance: f64, mu0: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("untunable input: {0}")]
    Untunable(String),

    #[error("unsupported table cell: {0}")]
    UnsupportedCell(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("{0}")]
    Io(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
