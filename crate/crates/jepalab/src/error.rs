use std::path::PathBuf;

/// Crate-wide error type.
///
/// `exit_code` maps variants onto the CLI contract: 1 for configuration
/// problems, 2 for runtime/numeric failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite values produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward already consumed this recording")]
    BackwardReplay,

    #[error("backward requires a recorded graph with a scalar loss: {0}")]
    BackwardInvalid(String),

    #[error("degenerate mask config: context empty after {retries} retries")]
    DegenerateMask { retries: usize },

    #[error("degenerate embeddings: {0}")]
    DegenerateEmbeddings(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("checkpoint format error: {0}")]
    Container(String),

    #[error("training aborted at step {step} (lr={lr:.3e}, mu={mu:.6}): {message}")]
    TrainingAborted {
        step: u64,
        lr: f64,
        mu: f64,
        message: String,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code for this error: 0 is success, 1 config, 2 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
