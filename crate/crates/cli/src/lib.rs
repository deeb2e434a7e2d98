//! Command-line front end for the `gpvae` library: data generation,
//! training, imputation, evaluation and reporting over one output
//! directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod run;

use std::path::PathBuf;

pub use config::{ModelKind, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] gpvae::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

impl CliError {
    /// Process exit status: 2 for bad configuration or input, 3 for
    /// numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(
                gpvae::Error::Invalid(_) | gpvae::Error::Parse { .. } | gpvae::Error::Format(_),
            ) => 2,
            CliError::Json { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_separate_input_numeric_and_other_failures() {
        let numeric = CliError::Core(gpvae::Error::NonFinite { op: "exp".into() });
        let invalid = CliError::Core(gpvae::Error::Invalid("x".into()));
        let io = CliError::Core(gpvae::Error::Io(std::io::Error::other("disk")));
        assert_eq!(numeric.exit_code(), 3);
        assert_eq!(invalid.exit_code(), 2);
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(io.exit_code(), 1);
    }
}
