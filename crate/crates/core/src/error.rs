use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("length mismatch: header declares {expected} bytes of data, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("invalid wcs: {0}")]
    InvalidWcs(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid source record {id}: {reason}")]
    InvalidSource { id: u64, reason: String },

    #[error("projection error: {0}")]
    Projection(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("kernel of size {kernel} does not fit image {width}x{height}")]
    KernelTooLarge { kernel: usize, width: usize, height: usize },

    #[error("resample plan is empty: grids do not overlap on the sky")]
    EmptyPlan,

    #[error("no sources detected in reference image")]
    NoSources,

    #[error("no valid pixels: {0}")]
    NoValidPixels(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
