use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGrad { param: String },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("idx parse error at byte {offset}: {msg}")]
    IdxParse { offset: usize, msg: String },

    #[error("checkpoint parse error at byte {offset}: {msg}")]
    CheckpointParse { offset: usize, msg: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("label {label} out of range 0..{num_classes}")]
    LabelRange { label: usize, num_classes: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config: {0}")]
    Config(#[from] serde_json::Error),
}
