use std::path::PathBuf;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] claimcheck_core::Error),

    /// Bad flags, missing settings or an unreadable config file.
    #[error("{0}")]
    Usage(String),

    #[error("invalid config {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::ConfigFile { .. } => "config",
            CliError::Io { .. } => "io",
        }
    }

    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_usage() => 2,
            CliError::Usage(_) | CliError::ConfigFile { .. } => 2,
            _ => 1,
        }
    }

    /// The single-line JSON document written to stderr.
    pub fn to_json(&self) -> String {
        json!({
            "schema_version": claimcheck_core::SCHEMA_VERSION,
            "error": { "kind": self.kind(), "message": self.to_string() },
        })
        .to_string()
    }
}
