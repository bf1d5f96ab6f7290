use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants map onto the failure kinds the modules promise: geometry,
/// detection, corpus ingestion, numerics, checkpoints and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid crop: {0}")]
    InvalidCrop(String),
    #[error("no face detected")]
    NoFace,
    #[error("detector backend error: {0}")]
    Backend(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("manifest error: {}", .0.join("; "))]
    Manifest(Vec<String>),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("initialization error: {0}")]
    Init(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("no prediction: {0}")]
    NoPrediction(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
