use std::fmt;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure categories surfaced by every module of the crate.
///
/// The `category` string is stable and machine-parsable; the CLI prints it
/// as the first token of its single-line error report.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and a layer) disagree on shape.
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },
    /// A caller-supplied argument is outside its documented domain.
    InvalidArgument(String),
    /// A loss or gradient stopped being finite.
    NonFinite(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// An image file could not be decoded or encoded.
    Image { path: PathBuf, message: String },
    /// The dataset tree does not follow the four-folder layout.
    Dataset(String),
    /// A binary weight file is malformed; `offset` is the byte position of the failure.
    Parse {
        what: &'static str,
        offset: usize,
        message: String,
    },
    Checkpoint(String),
    Config { key: String, message: String },
}

impl Error {
    pub fn shape(op: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Dataset(_) => "dataset",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config { .. } => "config",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                op,
                expected,
                found,
            } => write!(f, "{op}: shape mismatch, expected {expected}, found {found}"),
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Image { path, message } => write!(f, "{}: {message}", path.display()),
            Error::Dataset(m) => write!(f, "{m}"),
            Error::Parse {
                what,
                offset,
                message,
            } => write!(f, "{what}: parse error at byte {offset}: {message}"),
            Error::Checkpoint(m) => write!(f, "checkpoint: {m}"),
            Error::Config { key, message } => write!(f, "config key `{key}`: {message}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
