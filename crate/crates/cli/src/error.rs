use std::fmt;

/// Command failure, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// Unreadable or invalid input files (exit 2).
    Data(String),
    /// Anything that went wrong while running (exit 3).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<groundnc::Error> for CliError {
    fn from(e: groundnc::Error) -> Self {
        match e {
            groundnc::Error::Config(m) => CliError::Usage(m),
            e if e.is_data_error() => CliError::Data(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<groundnc::ScoreError> for CliError {
    fn from(e: groundnc::ScoreError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn write_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}
