use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid world spec: {0}")]
    Spec(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {path:?}{}: {source}", case_suffix(.case))]
    Io {
        path: PathBuf,
        case: Option<String>,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid state: {0}")]
    State(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("busy: {0}")]
    Busy(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

fn case_suffix(case: &Option<String>) -> String {
    match case {
        Some(id) => format!(" (case {id})"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            case: None,
            source,
        }
    }

    pub(crate) fn case_io(path: impl Into<PathBuf>, case: &str, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            case: Some(case.to_string()),
            source,
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
