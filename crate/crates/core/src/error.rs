use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate subject `{subject_id}`: observed samples have zero variance")]
    DegenerateSubject { subject_id: String },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize, history: Vec<f64> },

    #[error("model misuse: {0}")]
    Misuse(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data not found: {0}")]
    DataNotFound(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
