use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation")]
    DegenerateRotation,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    /// Malformed file contents. `offset` is the byte position where decoding failed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("no valid features")]
    NoValidFeatures,

    #[error("no valid pixels")]
    NoValidPixels,

    #[error("no foreground pixels")]
    NoForeground,

    #[error("empty result")]
    EmptyResult,

    #[error("missing feature vector for instance id {0}")]
    MissingInstance(u16),

    #[error("loss diverged (non-finite) at iteration {0}")]
    Diverged(usize),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn dims(message: impl Into<String>) -> Self {
        Error::DimensionMismatch(message.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
