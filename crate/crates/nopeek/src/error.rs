//! Crate-wide error type.

use crate::splitnet::wire::WireError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sample size: {0}")]
    SampleSize(String),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("linear algebra failure: {0}")]
    LinAlg(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for config/format problems, 3 for
    /// protocol/wire problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            Error::Protocol(_) | Error::Wire(_) => 3,
            _ => 1,
        }
    }
}
