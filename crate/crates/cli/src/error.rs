use std::path::PathBuf;

use thiserror::Error;

/// Errors from reading specs and data, building models and fitting them.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    #[error("{file}: row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        file: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{file}: row {row}, column {column}: {value:?} is not a number")]
    NonNumeric {
        file: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("numerical failure: {0}")]
    Numerical(vmp_core::Error),
}

impl CliError {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn from_json(e: &serde_json::Error) -> Self {
        CliError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }

    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

/// Whether an engine error reflects the numbers rather than the model.
pub fn is_numerical(e: &vmp_core::Error) -> bool {
    matches!(
        e,
        vmp_core::Error::Numerical(_) | vmp_core::Error::Domain(_) | vmp_core::Error::Support(_)
    )
}

pub type Result<T> = std::result::Result<T, CliError>;
