//! Benchmark problems, the macroreplication harness and the `mambo` CLI.

pub mod cli;
pub mod config;
pub mod harness;
pub mod problems;
pub mod validate;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    /// Bad configuration or usage. Exit code 1.
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// The optimization itself failed. Exit code 2.
    #[error("{0}")]
    Run(String),
}

impl BenchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) => 1,
            BenchError::Io { .. } | BenchError::Run(_) => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BenchError::Io { path: path.into(), source }
    }
}

impl From<mambo_core::Error> for BenchError {
    fn from(e: mambo_core::Error) -> Self {
        BenchError::Run(e.to_string())
    }
}
