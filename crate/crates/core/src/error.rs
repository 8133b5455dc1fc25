use std::path::PathBuf;

/// Errors produced by the segmentation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's shape or value contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (network, training, dataset split).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in weights file: expected \"LSEG\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weights format version {0}")]
    UnsupportedVersion(u32),

    #[error("weights file truncated: {0}")]
    Truncated(String),

    #[error("architecture/weights shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed architecture document: {0}")]
    Architecture(String),

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: String, message: String },

    #[error("unexpected channel layout in {path}: {message}")]
    ChannelLayout { path: String, message: String },

    #[error("mask {path} holds non-binary value {value} at ({x}, {y})")]
    InvalidMask {
        path: String,
        value: u8,
        x: u32,
        y: u32,
    },

    #[error("cannot encode image {path}: {message}")]
    ImageEncode { path: String, message: String },

    #[error("malformed manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
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

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
