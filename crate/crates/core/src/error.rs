use std::io;

use thiserror::Error;

/// Crate-wide error type. Variants are grouped so the CLI can map them onto
/// exit codes: configuration/input problems exit 2, data/runtime problems
/// exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid period `{text}`: expected `YYYY-S` with S in {{1,2}}")]
    PeriodParse { text: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("macro table missing periods: {}", .0.join(", "))]
    MissingMacroPeriods(Vec<String>),

    #[error("fitting error: {0}")]
    Fit(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn io(path: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code for this error: 2 for configuration/input problems,
    /// 3 for data or runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::PeriodParse { .. } => 3,
            Error::Schema(_) | Error::Config(_) | Error::Io { .. } => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
