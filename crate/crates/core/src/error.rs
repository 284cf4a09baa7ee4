use thiserror::Error;

/// Errors raised by the core numerical routines and file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown class id `{0}`")]
    UnknownClass(String),

    #[error("duplicate class id `{0}`")]
    DuplicateClass(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class `{class}` has {available} examples but needs {required} for non-empty splits")]
    ClassTooSmall {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_shape(
    (left_rows, left_cols): (usize, usize),
    (right_rows, right_cols): (usize, usize),
) -> Result<()> {
    if left_rows == right_rows && left_cols == right_cols {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            left_rows,
            left_cols,
            right_rows,
            right_cols,
        })
    }
}
