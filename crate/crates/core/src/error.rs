use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("cannot place {classes} class means at separation {separation} in {dim} dimensions")]
    InfeasibleGeometry {
        classes: usize,
        dim: usize,
        separation: f64,
    },

    #[error("malformed dataset (line {line}): {reason}")]
    MalformedDataset { line: usize, reason: String },

    #[error("task index {index} out of range for {count} tasks")]
    TaskOutOfRange { index: usize, count: usize },

    #[error("label {label} lies outside logit range {start}..{end}")]
    LabelOutOfRange {
        label: usize,
        start: usize,
        end: usize,
    },

    #[error("head {head} is not a future-past head (insertion task {insertion}, current task {current})")]
    NotFuturePast {
        head: usize,
        insertion: usize,
        current: usize,
    },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("task {got} trained out of order (expected {expected})")]
    OutOfOrder { expected: usize, got: usize },

    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),

    #[error("nothing to aggregate: {0}")]
    Empty(String),

    #[error("training diverged at step {step} (task {task}): {term} is not finite")]
    Diverged { step: usize, task: usize, term: String },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
