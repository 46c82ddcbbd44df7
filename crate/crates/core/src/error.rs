use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated pixel data: expected {expected} samples, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("invalid dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("too few control points: {0} (need at least 3)")]
    TooFewControlPoints(usize),
    #[error("degenerate control-point configuration: {0}")]
    DegenerateControlPoints(String),
    #[error("empty peer set")]
    EmptyPeerSet,
    #[error("empty landmark group")]
    EmptyGroup,
    #[error("group has zero spread")]
    ZeroSpread,
    #[error("unknown grouping scheme: {0}")]
    UnknownScheme(String),
    #[error("structure validation rejected {0} consecutive samples")]
    SamplingExhausted(usize),
    #[error("degenerate heatmap for landmark {0}: total mass is zero")]
    DegenerateHeatmap(usize),
    #[error("backward pass requested without a cached forward pass")]
    MissingForwardCache,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("landmark file error: {0}")]
    LandmarkFile(String),
    #[error("zero normalizer for sample {0}")]
    ZeroNormalizer(usize),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
