use std::path::PathBuf;

/// Every failure the library can surface, grouped so the CLI can map each
/// kind onto a stable exit status.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid UTF-8 at byte offset {offset}")]
    Decode { path: PathBuf, offset: usize },
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("cannot encode {ch:?}: character is not in the vocabulary")]
    Encode { ch: char },
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range (bound {bound}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("numeric error: non-finite gradient in parameter `{param}`")]
    NonFinite { param: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("resource error: {0}")]
    Resource(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged {
        step: usize,
        loss: f64,
        /// Serialized parameters from the last step whose loss was accepted.
        last_good: Option<Vec<u8>>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit status used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Decode { .. } | Error::Format(_) => 3,
            Error::NonFinite { .. } | Error::Diverged { .. } => 4,
            Error::Calibration(_) => 5,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
