// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),

    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("bad magic {0:?}")]
    BadMagic([u8; 8]),

    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u32),

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("trailing data: {0} bytes after payload")]
    TrailingData(usize),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rank deficient: requested {requested} components, data supports only {achievable}")]
    RankDeficient { requested: usize, achievable: usize },

    #[error("direction is not unit length (norm {0})")]
    NonUnitDirection(f64),

    #[error("no direction for layer {0}")]
    MissingLayer(usize),

    #[error("single class: probe training needs at least two distinct labels")]
    SingleClass,

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("grid point {strength}: {message}")]
    GridPoint { strength: f64, message: String },

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True when the failure stems from bad or missing input rather than
    /// from the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::InvalidShape(_)
                | Error::ShapeMismatch { .. }
                | Error::BadMagic(_)
                | Error::UnsupportedDtype(_)
                | Error::Truncated(_)
                | Error::TrailingData(_)
                | Error::Manifest(_)
                | Error::Json { .. }
                | Error::Line { .. }
                | Error::HashMismatch { .. }
                | Error::InvalidArgument(_)
                | Error::UnknownLabel(_)
                | Error::Distribution(_)
        )
    }
}
