use thiserror::Error;

/// Library-wide error type.
///
/// Variants are grouped so the CLI can map them to exit codes: usage
/// problems are caught before dispatch, data/format problems map to exit 2,
/// and training divergence maps to exit 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate image_id {0:?}")]
    DuplicateId(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("training diverged at batch {batch}: non-finite loss")]
    Divergence { batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
