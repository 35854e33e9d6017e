//! Run harness for the reduced Merton HJB solvers: configuration ingestion,
//! training and finite difference runs, comparisons and portfolio surfaces.
//! Every run writes CSV files plus one `manifest.json`.

pub mod commands;
pub mod config;
pub mod manifest;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The finite difference march produced singular values; the cube was
    /// still written.
    #[error("singular values: {0}")]
    Singular(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) => 3,
            CliError::Singular(_) => 4,
        }
    }
}

impl From<merton_hjb::Error> for CliError {
    fn from(e: merton_hjb::Error) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
