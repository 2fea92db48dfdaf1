use std::path::PathBuf;

/// Errors raised anywhere in the engine.
///
/// Variants are grouped by the contract that was violated rather than by the
/// module that noticed it, so callers can react to e.g. every lifecycle error
/// the same way regardless of which engine reported it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("capacity error: sequence of length {len} exceeds max_len {max_len}")]
    Capacity { len: usize, max_len: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("registration error: {0}")]
    Registration(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("lifecycle error: {0}")]
    Lifecycle(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("stage `{stage}` failed at iteration {iteration}, step {step}: {source}")]
    Stage {
        stage: &'static str,
        iteration: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// An I/O failure tagged with the path involved.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
