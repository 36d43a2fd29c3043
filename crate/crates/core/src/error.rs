use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DerfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DerfError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("cache does not belong to the current parameters (cache revision {cache}, parameters at {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("non-finite gradient in `{path}`")]
    NonFiniteGradient { path: String },

    #[error("non-finite loss at iteration {iter} ({phase})")]
    NonFiniteLoss { iter: u64, phase: &'static str },

    #[error("could not place {count} distinct sites after {attempts} resamples")]
    SitePlacement { count: usize, attempts: usize },

    #[error("checkpoint has bad magic {found:?}")]
    BadMagic { found: [u8; 8] },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing image for frame {frame}: {path}")]
    MissingImage { frame: usize, path: PathBuf },

    #[error("image {path} is {found_w}x{found_h}, dataset declares {want_w}x{want_h}")]
    ImageDimensions {
        path: PathBuf,
        found_w: u32,
        found_h: u32,
        want_w: u32,
        want_h: u32,
    },

    #[error("failed to parse {path}: {source} (line {line}, column {column})")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DerfError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DerfError::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        DerfError::Parse {
            path: path.into(),
            line: source.line(),
            column: source.column(),
            source,
        }
    }
}
