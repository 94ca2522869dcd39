use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input file lacks a required column.
    #[error("schema error: missing column `{column}`")]
    Schema { column: String },

    /// A row carries invalid content.
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    /// Encoder weights could not be located or no adapter is available.
    #[error("load error: {0}")]
    Load(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {loss}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name of the error category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Schema { .. } => "schema",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Precondition(_) => "precondition",
            Error::Shape(_) => "shape",
            Error::Spec(_) => "spec",
            Error::Load(_) => "load",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    /// True for errors caused by invalid configuration or usage rather than
    /// by data or runtime conditions.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Spec(_))
    }
}
