use std::path::PathBuf;

use thiserror::Error;

use crate::volume::GridShape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: GridShape, right: GridShape },

    #[error("invalid grid shape: {0}")]
    InvalidShape(String),

    #[error("data length {actual} does not match shape (expected {expected})")]
    DataLength { expected: usize, actual: usize },

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("index ({x}, {y}, {z}) out of bounds for {shape}")]
    OutOfBounds { x: usize, y: usize, z: usize, shape: GridShape },

    #[error("empty domain")]
    EmptyDomain,

    #[error("invalid correlation {0}")]
    InvalidCorrelation(f64),

    #[error("empty histogram")]
    EmptyHistogram,

    #[error("histogram bin counts differ: {0} vs {1}")]
    BinMismatch(usize, usize),

    #[error("series length mismatch: {0} vs {1}")]
    SeriesLength(usize, usize),

    #[error("series too short: {0} samples (need at least 2)")]
    SeriesTooShort(usize),

    #[error("no eligible cubes")]
    NoEligibleCubes,

    #[error("zero variance")]
    ZeroVariance,

    #[error("all requested labels are absent from both volumes")]
    NoLabelsPresent,

    #[error("at least two subject maps are required, got {0}")]
    TooFewMaps(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-differentiable configuration: analytic gradients need soft binning when lambda > 0")]
    NonDifferentiable,

    #[error("diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error(transparent)]
    Nifti(#[from] crate::pipeline::nifti::NiftiError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(left: GridShape, right: GridShape) -> Self {
        Error::ShapeMismatch { left, right }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
