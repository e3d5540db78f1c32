use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or block specs that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch norm needs at least 2 samples per channel in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },

    #[error("target of length {label_len} needs at least {required} frames, got {frames}")]
    InfeasibleTarget {
        label_len: usize,
        required: usize,
        frames: usize,
    },

    #[error("brute-force enumeration of {0} paths is too large")]
    InstanceTooLarge(u128),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("unknown feature layer `{0}`")]
    UnknownLayer(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{path}: bad magic number {found:#010x} at offset 0 (expected {expected:#010x})")]
    IdxMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated at offset {offset} (needed {needed} more bytes)")]
    Truncated { path: PathBuf, offset: u64, needed: u64 },

    #[error("count mismatch at offset 4: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("glyphs need {needed} px but the canvas is {width} px wide")]
    CanvasOverflow { needed: usize, width: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: found `{0}`")]
    CheckpointVersion(String),

    #[error("checkpoint checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint has no entry for parameter `{0}`")]
    MissingParameter(String),

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable tag for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::DegenerateBatch(_) => "degenerate_batch",
            Error::NonFinite(_) => "non_finite",
            Error::NonFiniteGradient(_) => "non_finite_gradient",
            Error::TargetOutOfRange { .. } => "target_out_of_range",
            Error::InfeasibleTarget { .. } => "infeasible_target",
            Error::InstanceTooLarge(_) => "instance_too_large",
            Error::NotScalar(_) => "not_scalar",
            Error::UnknownLayer(_) => "unknown_layer",
            Error::Empty(_) => "empty",
            Error::IdxMagic { .. } => "idx_magic",
            Error::Truncated { .. } => "truncated",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::CanvasOverflow { .. } => "canvas_overflow",
            Error::Checkpoint(_) => "checkpoint",
            Error::CheckpointVersion(_) => "checkpoint_version",
            Error::Checksum { .. } => "checksum",
            Error::MissingParameter(_) => "missing_parameter",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
