use thiserror::Error;

#[derive(Debug, Error)]
pub enum EksError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid convolution spec: {0}")]
    InvalidSpec(String),

    #[error("task mask row {row} is not one-hot")]
    MaskNotOneHot { row: usize },

    #[error("layer is fused for task {0}; unfuse it before running the multi-task forward")]
    LayerFused(usize),

    #[error("layer is not fused")]
    LayerNotFused,

    #[error("task index {task} out of range for {count} tasks")]
    TaskOutOfRange { task: usize, count: usize },

    #[error("label {label} out of range for task {task} with {classes} classes")]
    LabelOutOfRange {
        task: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EksError>;
