//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

/// Everything that can go wrong while loading, fitting, predicting or verifying.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Header or row shape does not match the declared columns.
    #[error("schema error: {0}")]
    Schema(String),

    /// A value is present but violates an invariant (non-finite, label out of range, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Dataset and model disagree on a dimension.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// A record lacks an input its estimator needs, or arguments have mismatched lengths.
    #[error("input error: {0}")]
    Input(String),

    /// Fitting cannot proceed with the data it was given.
    #[error("fit error: {0}")]
    Fit(String),

    /// A floating point computation produced a non-finite or singular result.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed JSON or an unknown enumerated value.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("version error: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    /// A loaded object violates a documented invariant.
    #[error("invariant error: {0}")]
    Invariant(String),

    /// A theoretical identity failed to hold; the message names the clause.
    #[error("verification failed: {0}")]
    Verification(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Verification(_) => 4,
            Error::Numeric(_) => 5,
            _ => 3,
        }
    }
}
