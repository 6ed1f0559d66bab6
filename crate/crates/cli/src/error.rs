use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// An upstream artifact or configured input is absent. The path is the
    /// exact location that was checked.
    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] atlasreg_core::Error),
}

impl CliError {
    pub fn missing(path: impl Into<PathBuf>, hint: impl Into<String>) -> Self {
        CliError::MissingInput {
            path: path.into(),
            hint: hint.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::MissingInput { .. } => "missing_input",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(_) => "core",
        }
    }

    /// Machine-readable form emitted on stderr before a nonzero exit.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
            }
        });
        if let CliError::MissingInput { path, .. } | CliError::Io { path, .. } = self {
            v["error"]["path"] = serde_json::Value::String(path.display().to_string());
        }
        v
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
