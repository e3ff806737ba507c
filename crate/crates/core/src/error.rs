use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

/// Errors produced by the pipeline. Each variant maps onto one CLI exit code
/// class through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error in {context}: {message}")]
    Data { context: String, message: String },

    #[error("unknown node id {0}")]
    UnknownNode(u64),

    #[error("no usable sinuosity samples (dispositions: {0})")]
    NoUsableSamples(String),

    #[error("no fuel specification covers {0}")]
    UncoveredDate(NaiveDate),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that raised it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// 0 success, 1 configuration error, 2 data error, 3 internal error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UncoveredDate(_) => 1,
            // A missing input file is a configuration problem; anything else
            // on the I/O path is data.
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
            Error::Io { .. } | Error::Data { .. } | Error::UnknownNode(_) => 2,
            Error::NoUsableSamples(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Internal(_) => 3,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::data("csv", e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::data("json", e.to_string())
    }
}
