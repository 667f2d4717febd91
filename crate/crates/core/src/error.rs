use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// Variants are grouped by how an operator should react to them; see
/// [`Error::kind`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("height {height} not divisible by {divisor}")]
    NotDivisible { height: usize, divisor: usize },

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown variant {0:?} (expected one of CGPN, CGPN-1, CGPN-2, CGPN-3, CGPN-4)")]
    UnknownVariant(String),

    #[error("weight {layer}: expected shape {expected:?}, found {found:?}")]
    WeightMismatch {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("weight {layer} missing from {path}")]
    MissingWeight { layer: String, path: PathBuf },

    #[error("incompatible: {0}")]
    Compatibility(String),

    #[error("corrupt checkpoint {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

/// Coarse classification used by the command line to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration, missing or malformed data.
    Input,
    /// A checkpoint or weight file does not fit the requested model.
    Compatibility,
    /// A checkpoint is unreadable.
    Corruption,
    /// Failure during computation.
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_)
            | Error::NotDivisible { .. }
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Dataset(_)
            | Error::Config(_)
            | Error::UnknownVariant(_) => ErrorKind::Input,
            Error::WeightMismatch { .. } | Error::MissingWeight { .. } | Error::Compatibility(_) => {
                ErrorKind::Compatibility
            }
            Error::Corrupt { .. } => ErrorKind::Corruption,
            Error::Shape(_) | Error::Tensor(_) | Error::NonFinite { .. } => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
