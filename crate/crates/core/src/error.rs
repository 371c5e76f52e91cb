use std::fmt;
use std::path::PathBuf;

/// Errors produced by the library. Binaries wrap these in `anyhow`.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    /// A forward op produced NaN or infinity.
    NonFinite { op: &'static str },
    /// Invalid argument or out-of-range value.
    Invalid(String),
    /// Backward was requested on something that cannot be differentiated.
    Backward(String),
    /// Configuration rejected.
    Config(String),
    /// Malformed input data (labels, images, checkpoints).
    Data(String),
    /// Training diverged.
    Divergence { iter: usize, what: String },
    Io { path: PathBuf, source: std::io::Error },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                op,
                expected,
                actual,
            } => write!(
                f,
                "{op}: shape mismatch, expected {expected:?} but got {actual:?}"
            ),
            Error::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Backward(msg) => write!(f, "backward: {msg}"),
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Data(msg) => write!(f, "data: {msg}"),
            Error::Divergence { iter, what } => {
                write!(f, "training diverged at iteration {iter}: {what}")
            }
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
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

impl Error {
    pub(crate) fn shape(op: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            op,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
