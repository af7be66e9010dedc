use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("firm {firm}: periods are not consecutive (gap after period {after})")]
    Gap { firm: String, after: i64 },

    #[error("firm {firm}: duplicate period {period}")]
    DuplicatePeriod { firm: String, period: i64 },

    #[error("firm {firm}: {count} observations, at least 3 are required")]
    TooShort { firm: String, count: usize },

    #[error("panel is empty")]
    EmptyPanel,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("firm {firm}: initial GMM estimation failed: {msg}")]
    InitialEstimate { firm: String, msg: String },

    #[error("group {group}: under-identified ({rows} usable rows for {params} parameters)")]
    UnderIdentified {
        group: usize,
        rows: usize,
        params: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input or configuration rather than
    /// by the numerics.
    pub fn is_config(&self) -> bool {
        !matches!(
            self,
            Error::Domain(_)
                | Error::Numerical(_)
                | Error::InitialEstimate { .. }
                | Error::UnderIdentified { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
