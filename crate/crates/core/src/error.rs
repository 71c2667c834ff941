use std::path::PathBuf;

use thiserror::Error;
use ynet_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid volume kind code {0}")]
    InvalidKindCode(u8),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("degenerate intensity range: percentiles coincide at {0}")]
    DegenerateRange(f64),
    #[error("tube control point {point:?} lies outside volume dims {dims:?}")]
    TubeOutOfBounds { point: [f64; 3], dims: [usize; 3] },
    #[error("invalid phantom spec: {0}")]
    BadPhantom(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint does not match its embedded config: {0}")]
    ConfigMismatch(String),
    #[error("position {origin:?} lies outside volume dims {dims:?}")]
    OutOfBounds { origin: [usize; 3], dims: [usize; 3] },
    #[error("volume dims {dims:?} smaller than patch size {patch}")]
    VolumeTooSmall { dims: [usize; 3], patch: usize },
    #[error("no positive patches, negative stride undefined")]
    NoPositives,
    #[error("training loss diverged at epoch {epoch}: {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("histogram needs at least two non-empty bins")]
    DegenerateHistogram,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
