use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("level {0} dBm is not part of the quantization scheme")]
    UnknownLevel(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("matrix is not positive semi-definite (smallest eigenvalue {0:e})")]
    NotPositiveSemiDefinite(f64),
    #[error("level index {index} exceeds the printable T-string alphabet ({max} symbols)")]
    AlphabetOverflow { index: usize, max: usize },
    #[error("malformed data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
