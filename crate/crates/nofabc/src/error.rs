use thiserror::Error;

#[derive(Debug, Error)]
pub enum NofaError {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("label {label} is not one-hot consistent: {reason}")]
    LabelError { label: usize, reason: &'static str },
    #[error("degenerate zero-norm vector in {0}")]
    DegenerateNorm(&'static str),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stale allocator weights: {expected} seen classes, weights have {got}")]
    StaleWeights { expected: usize, got: usize },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("file format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("pipeline failed at task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<NofaError>,
    },
}

impl NofaError {
    pub fn at_task(self, task: usize) -> Self {
        NofaError::Task {
            task,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, NofaError>;
