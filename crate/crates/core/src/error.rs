use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Checkpoints or task vectors do not line up (names, shapes, dtypes).
    #[error("structural mismatch: {0}")]
    Structural(String),

    /// Text could not be parsed in the expected format.
    #[error("parse error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse { line: Option<usize>, message: String },

    /// Bad configuration detected at construction time.
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced a non-finite intermediate.
    #[error("numeric error in {stage}: {detail}")]
    Numeric { stage: &'static str, detail: String },

    /// An external service (LLM API, judge) failed after retries.
    #[error("external service error: {0}")]
    ExternalService(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
