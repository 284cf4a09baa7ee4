use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] ccfi_core::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("class `{0}` has no training examples")]
    NoTrainingData(String),
    #[error("metrics file line {line}: {message}")]
    Metrics { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
