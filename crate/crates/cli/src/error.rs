use std::path::PathBuf;

use serde_json::json;
use smpc::SmpcError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("cannot {action} {path}: {source}")]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] SmpcError),

    #[error("{failed} property suite(s) failed; see {report}")]
    PropertiesFailed { failed: usize, report: PathBuf },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Config(_) => "invalid_config",
            CliError::Core(e) => e.kind(),
            CliError::PropertiesFailed { .. } => "properties_failed",
        }
    }

    /// Process exit status: 2 for bad invocations and configs, 3 for a
    /// property report with failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Core(SmpcError::Parse(_) | SmpcError::InvalidModel(_) | SmpcError::InvalidGrid(_)) => 2,
            CliError::PropertiesFailed { .. } => 3,
            _ => 1,
        }
    }

    /// One-line JSON document written to stderr.
    pub fn to_json(&self) -> String {
        let mut err = json!({ "kind": self.kind(), "message": self.to_string() });
        if let CliError::Core(SmpcError::Run { seed, .. }) = self {
            err["seed"] = json!(seed);
        }
        json!({ "error": err }).to_string()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
