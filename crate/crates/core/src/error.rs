//! Error type shared by every stage of the pipeline.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("index {index} out of range (limit {limit})")]
    Range { index: usize, limit: usize },

    #[error("scenario ({r}, {rdot}) is not a cell center of the grid")]
    NotACellCenter { r: f64, rdot: f64 },

    #[error("field shape mismatch: {0}")]
    Shape(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error("no usable data: {0}")]
    EmptyData(String),

    #[error("library is degenerate: {0}")]
    DegenerateLibrary(String),

    #[error("importance function violates the support condition at cell {flat}")]
    Support { flat: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("Cholesky factorization failed after jitter escalation to {jitter:e} (n = {n}, min diagonal {min_diag:e}, max diagonal {max_diag:e})")]
    Factorization {
        jitter: f64,
        n: usize,
        min_diag: f64,
        max_diag: f64,
    },

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("candidate set exhausted: {0}")]
    Exhausted(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Range { .. } | Error::NotACellCenter { .. } => 2,
            Error::Shape(_)
            | Error::DegenerateLibrary(_)
            | Error::Support { .. }
            | Error::Numerical(_)
            | Error::Factorization { .. }
            | Error::NonConvergence { .. }
            | Error::Exhausted(_)
            | Error::Undefined(_) => 3,
            Error::Parse { .. } | Error::EmptyData(_) | Error::Io { .. } | Error::Format { .. } => 4,
        }
    }
}
