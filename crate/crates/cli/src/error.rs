use std::path::Path;

use serde_json::json;
use thiserror::Error;

/// Failures of a CLI invocation, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}{message}", key.as_ref().map(|k| format!("`{k}`: ")).unwrap_or_default())]
    Config {
        message: String,
        key: Option<String>,
    },

    #[error("{0}")]
    Usage(String),

    #[error("failed invariants: {}", .0.join(", "))]
    CheckFailed(Vec<String>),

    #[error("{0}")]
    Training(String),

    #[error("run failed: {0}")]
    Runtime(String),

    #[error("thresholds not met: {}", .0.join("; "))]
    Thresholds(Vec<String>),

    #[error("cannot write {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn config_key(key: &str, message: impl Into<String>) -> Self {
        Self::Config {
            message: message.into(),
            key: Some(key.to_string()),
        }
    }

    /// A library validation error, with its parameter key placed under
    /// `section`.
    pub fn from_core_config(e: ergodic_core::Error, section: &str) -> Self {
        match e {
            ergodic_core::Error::InvalidParam { key, reason } => Self::Config {
                message: reason,
                key: Some(format!("{section}.{key}")),
            },
            other => Self::Config {
                message: other.to_string(),
                key: Some(section.to_string()),
            },
        }
    }

    /// A failure while training; the message always starts with
    /// "training failed".
    pub fn training(e: ergodic_core::Error) -> Self {
        match e {
            ergodic_core::Error::Training(_) => Self::Training(e.to_string()),
            e => Self::Training(format!("training failed: {e}")),
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::CheckFailed(_) => 1,
            Self::Config { .. } | Self::Usage(_) => 2,
            Self::Training(_) | Self::Runtime(_) => 3,
            Self::Thresholds(_) => 4,
            Self::Io { .. } => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Self::Config { .. } => "invalid_config",
            Self::Usage(_) => "usage",
            Self::CheckFailed(_) => "check_failed",
            Self::Training(_) => "training_failed",
            Self::Runtime(_) => "run_failed",
            Self::Thresholds(_) => "thresholds_failed",
            Self::Io { .. } => "io",
        }
    }

    /// One-line JSON error record for stderr.
    pub fn to_json(&self) -> String {
        let mut err = json!({
            "code": self.exit_code(),
            "kind": self.kind(),
            "message": self.to_string(),
        });
        match self {
            Self::Config { key: Some(k), .. } => err["key"] = json!(k),
            Self::CheckFailed(names) => err["failed"] = json!(names),
            Self::Thresholds(f) => err["failed"] = json!(f),
            Self::Io { path, .. } => err["path"] = json!(path),
            _ => {}
        }
        json!({ "error": err }).to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_and_record() {
        let e = CliError::config_key("model.depth", "must be a non-negative integer");
        assert_eq!(e.exit_code(), 2);
        let v: serde_json::Value = serde_json::from_str(&e.to_json()).unwrap();
        assert_eq!(v["error"]["key"], "model.depth");
        assert_eq!(v["error"]["code"], 2);
        assert_eq!(
            CliError::CheckFailed(vec!["gradient".into()]).exit_code(),
            1
        );
        assert_eq!(CliError::Training("x".into()).exit_code(), 3);
        assert_eq!(CliError::Thresholds(vec![]).exit_code(), 4);
        assert_eq!(CliError::io(Path::new("/x"), "denied").exit_code(), 5);
    }
}
