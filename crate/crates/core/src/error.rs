use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("schema error in {}: missing columns {missing:?}", path.display())]
    Schema { path: PathBuf, missing: Vec<String> },

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("attribute {attribute}={value} outside configured range [{lo}, {hi}]")]
    Binning {
        attribute: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("instance too large: {0}")]
    Size(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing subjects in estimate set: {0:?}")]
    MissingSubjects(Vec<String>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Param(_) => 2,
            Error::Format { .. }
            | Error::Schema { .. }
            | Error::Io { .. }
            | Error::MissingSubjects(_)
            | Error::Binning { .. } => 3,
            Error::Numeric(_) | Error::Degenerate(_) | Error::Shape(_) | Error::Size(_) => 4,
        }
    }
}
