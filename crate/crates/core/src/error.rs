use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("concat input {index} has shape {found:?}, expected batch/spatial {expected:?}")]
    ConcatMismatch {
        index: usize,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("pooling window {window} exceeds spatial extent {height}x{width}")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("unsupported kernel size {0}x{1}; only 1x1 and 3x3 convolutions are built")]
    UnsupportedKernel(usize, usize),

    #[error("class target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; reset it before reuse")]
    BackwardTwice,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("scene generation gave up after {attempts} attempts")]
    GenerationFailed { attempts: usize },

    #[error("training diverged at iteration {iteration}: loss {loss}, lr {learning_rate}, grad-norm {grad_norm}")]
    Diverged {
        iteration: usize,
        loss: f64,
        learning_rate: f64,
        grad_norm: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. }
            | Error::InvalidShape { .. }
            | Error::ConcatMismatch { .. }
            | Error::WindowTooLarge { .. }
            | Error::UnsupportedKernel(..) => "shape",
            Error::TargetOutOfRange { .. } => "target",
            Error::NonScalarLoss(_) | Error::BackwardTwice => "autodiff",
            Error::NonFinite(_) => "non_finite",
            Error::MissingGrad(_) | Error::UnknownParam(_) => "param",
            Error::DegenerateBox(_) => "box",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::GenerationFailed { .. } => "generation",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
