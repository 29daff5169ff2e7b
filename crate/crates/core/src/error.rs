use std::path::PathBuf;

use crate::chain::DecisionRecord;
use crate::domain::ValidationReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain sequence failed validation: {0}")]
    Validation(ValidationReport),

    #[error("rank-deficient stage map at stage {stage}")]
    RankDeficient { stage: usize },

    #[error("training diverged at step {step} (objective = {value})")]
    Diverged { step: usize, value: f64 },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("singular system: {0}")]
    Singular(&'static str),

    #[error("estimator was fitted on {overlap} samples that also appear in stage {stage}")]
    EstimatorNotIndependent { stage: usize, overlap: usize },

    #[error("stage {stage} out of range 1..={n_stages}")]
    StageOutOfRange { stage: usize, n_stages: usize },

    #[error("no checkpoints were recorded (checkpoint interval not configured)")]
    NoCheckpoints,

    #[error("chain run aborted at iteration {iteration} during {phase}: {source}")]
    ChainAborted {
        iteration: usize,
        phase: &'static str,
        #[source]
        source: Box<Error>,
        partial_log: Vec<DecisionRecord>,
    },

    #[error("parse error in {file} line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("chain file: {0}")]
    ChainFile(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}
