use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in conversation `{conversation}`, field `{field}`: {message}")]
    Parse {
        conversation: String,
        field: String,
        message: String,
    },

    #[error("dimension mismatch for {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("degenerate neighborhood: softmax mask has no kept entries")]
    DegenerateNeighborhood,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Dimension { .. }
            | Error::Validation(_)
            | Error::Label(_)
            | Error::Input(_) => 3,
            Error::Numeric(_) | Error::DegenerateNeighborhood => 4,
            Error::Config(_) => 2,
            Error::Shape(_) | Error::Io { .. } | Error::Json(_) => 1,
        }
    }
}
