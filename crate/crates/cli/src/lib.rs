//! Pipeline stages behind the `dynamo` binary. Each stage reads the
//! experiment config plus the artifacts of earlier stages from a run
//! directory and writes its own outputs next to them.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod export;
pub mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] dynamo_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit status: 2 for config errors, 3 for I/O, 4 for
    /// non-finite numerics and 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use dynamo_core::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::Io { .. } | Self::Format { .. } => 3,
            Self::Numeric(_) => 4,
            Self::Core(e) => match e {
                E::Config(_) | E::InvalidSpec(_) | E::FractionOverflow(_) | E::EmptySplit(_) => 2,
                E::Io(_) | E::Json(_) => 3,
                E::Numeric(_) => 4,
                _ => 1,
            },
        }
    }
}
