// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

use crate::bvar::cholesky::NotPositiveDefinite;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {context} (expected {expected}, got {actual})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("precision matrix lost positive definiteness after jitter retry: {0}")]
    NotPositiveDefinite(#[from] NotPositiveDefinite),

    #[error("invalid state: {0}")]
    State(String),

    /// Every hypothesis reached zero probability at step `t`; the engine
    /// still holds the state of step `t - 1`.
    #[error("numerical collapse at t = {t}: all joint log-probabilities are -inf")]
    NumericalCollapse { t: usize },

    #[error("unstable generator in segment {segment}: spectral radius {radius:.6} >= 1")]
    UnstableSegment { segment: usize, radius: f64 },

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::invalid(msg)
}
