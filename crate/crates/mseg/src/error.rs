//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label id {id} out of range for {classes} classes")]
    LabelOutOfRange { id: u16, classes: usize },

    #[error("tensor {0} has no gradient")]
    MissingGrad(String),

    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported NIfTI datatype code {0}")]
    NiftiDatatype(i16),

    #[error("phantom generation failed: could not place {0} structures in 1000 attempts")]
    PhantomPlacement(usize),

    #[error("constant volume: standard deviation is zero")]
    ConstantVolume,

    #[error("patch size {size} exceeds volume extent {extent}")]
    PatchTooLarge { size: usize, extent: usize },

    #[error("training diverged: loss is not finite at step {0}")]
    Divergence(usize),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("model has no decoder for the requested head: {0}")]
    MissingHead(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
