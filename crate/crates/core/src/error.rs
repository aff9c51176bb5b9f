use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: row {row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("backend error: {0}")]
    Backend(#[from] BackendError),

    #[error("round {round}: {source}")]
    Round {
        round: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failures raised by detector backends. Each external-process failure mode
/// is a separate variant so callers can tell a crashed child from a bad line.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("failed to spawn `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },

    #[error("child exited ({status}) while waiting for a response")]
    Exited { status: String },

    #[error("protocol violation at stdout line {line}: {message}: {text:?}")]
    Protocol {
        line: usize,
        message: String,
        text: String,
    },

    #[error("no response within {0:?}")]
    Timeout(std::time::Duration),

    #[error("backend reported failure: {0}")]
    Remote(String),

    #[error("pipe error: {0}")]
    Pipe(#[source] std::io::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_round(self, round: u32) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round {
                round,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code: 2 config, 3 data, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Backend(_) => 4,
            Error::Round { source, .. } => source.exit_code(),
            Error::Parse { .. } | Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
        }
    }
}
