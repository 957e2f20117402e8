use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("angle must be finite, got {0}")]
    NonFiniteAngle(f64),

    #[error("cannot convert the zero vector to an angle")]
    ZeroVector,

    #[error("uniform draw {0} outside (0, 1]")]
    InvalidUniform(f64),

    #[error("weights are not normalized (sum = {sum})")]
    UnnormalizedWeights { sum: f64 },

    #[error("weight vector is empty")]
    EmptyWeights,

    #[error("invalid bandwidth: {0}")]
    InvalidBandwidth(String),

    #[error("invalid kernel parameter: {0}")]
    InvalidKernel(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("loss must be a scalar, got a {rows}x{cols} value")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("state coincides with the radar position")]
    CoincidentWithRadar,

    #[error("proposal density must be positive, got {0}")]
    NonPositiveProposal(f64),

    #[error("forward and backward traces are misaligned: {0}")]
    Misaligned(String),

    #[error("loss index set is empty")]
    EmptyLossIndices,

    #[error("loss index {index} out of range for a sequence of length {len}")]
    LossIndexOutOfRange { index: usize, len: usize },

    #[error("snapshot density differs from the live density by {0:e}")]
    SnapshotMismatch(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss {value} at stage {stage}, step {step}")]
    NanLoss {
        value: f64,
        stage: String,
        step: usize,
    },

    #[error("replay log exhausted or inconsistent: {0}")]
    Replay(String),

    #[error("unknown parameter block {0:?}")]
    UnknownBlock(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Short machine-readable label for CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFiniteAngle(_) => "non_finite_angle",
            Error::ZeroVector => "zero_vector",
            Error::InvalidUniform(_) => "invalid_uniform",
            Error::UnnormalizedWeights { .. } => "unnormalized_weights",
            Error::EmptyWeights => "empty_weights",
            Error::InvalidBandwidth(_) => "invalid_bandwidth",
            Error::InvalidKernel(_) => "invalid_kernel",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NotOnTape => "not_on_tape",
            Error::NonScalarLoss { .. } => "non_scalar_loss",
            Error::CoincidentWithRadar => "coincident_with_radar",
            Error::NonPositiveProposal(_) => "non_positive_proposal",
            Error::Misaligned(_) => "misaligned",
            Error::EmptyLossIndices => "empty_loss_indices",
            Error::LossIndexOutOfRange { .. } => "loss_index_out_of_range",
            Error::SnapshotMismatch(_) => "snapshot_mismatch",
            Error::Config(_) => "config",
            Error::NanLoss { .. } => "nan_loss",
            Error::Replay(_) => "replay",
            Error::UnknownBlock(_) => "unknown_block",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }
}
