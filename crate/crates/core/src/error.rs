use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate volume: {0}")]
    DegenerateVolume(&'static str),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("input axis {axis} has size {size}, which is not divisible by {divisor}")]
    IndivisibleAxis { axis: char, size: usize, divisor: usize },

    #[error("label value {value} exceeds class count {classes}")]
    LabelOutOfRange { value: u8, classes: usize },

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("value {value} out of range for {datatype}")]
    ValueOutOfRange { value: f32, datatype: &'static str },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("no accumulated gradients")]
    NoAccumulatedGradients,

    #[error("no brain found")]
    NoBrainFound,

    #[error("NaN loss at round {round} epoch {epoch} (augmentation seed {seed:#018x})")]
    NanLoss { round: usize, epoch: usize, seed: u64 },

    #[error("augmentation produced a degenerate image for seed {seed:#018x} after {attempts} attempts")]
    AugmentFailed { seed: u64, attempts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
