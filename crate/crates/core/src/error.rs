use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised while producing log-probabilities.
///
/// Remote failures carry the id of the request that failed so that callers
/// can retry or report the affected example.
#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("request {request_id}: timed out waiting for scorer reply")]
    Timeout { request_id: String },
    #[error("request {request_id}: transport failure: {detail}")]
    Transport { request_id: String, detail: String },
    #[error("request {request_id}: malformed reply: {detail}")]
    Malformed { request_id: String, detail: String },
    #[error("request {request_id}: distribution sums to {sum}, outside tolerance")]
    Normalization { request_id: String, sum: f64 },
    #[error("request {request_id}: scorer reported: {message}")]
    Server { request_id: String, message: String },
    #[error("condition not covered by this scorer: {0}")]
    UnknownCondition(String),
    #[error("invalid scoring input: {0}")]
    InvalidInput(String),
}

impl ScoreError {
    /// Transport-level failures may succeed on a fresh connection.
    pub fn is_retriable(&self) -> bool {
        matches!(self, ScoreError::Timeout { .. } | ScoreError::Transport { .. })
    }

    pub fn request_id(&self) -> Option<&str> {
        match self {
            ScoreError::Timeout { request_id }
            | ScoreError::Transport { request_id, .. }
            | ScoreError::Malformed { request_id, .. }
            | ScoreError::Normalization { request_id, .. }
            | ScoreError::Server { request_id, .. } => Some(request_id),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input files rather than the run itself.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Data { .. } | Error::Invalid(_) | Error::Json(_) | Error::Io { .. }
        )
    }
}
