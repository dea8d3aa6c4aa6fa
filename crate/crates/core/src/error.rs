use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition; the message names the
    /// offending constraint.
    #[error("validation: {0}")]
    Validation(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Exhaustive search was requested beyond its configured cap.
    #[error("n = {n} exceeds the enumeration cap of {cap}")]
    CapExceeded { n: usize, cap: usize },

    /// The LP solver failed to converge or produced an uncertifiable
    /// result; distinct from "no strongly truthful score matrix exists".
    #[error("solver: {0}")]
    Solver(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
