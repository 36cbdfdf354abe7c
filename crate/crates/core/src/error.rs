use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus: {0}")]
    Corpus(String),
    #[error("corpus: {path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("vocab format: line {line}: {message}")]
    VocabFormat { line: usize, message: String },
    #[error("mlm: {0}")]
    Mlm(String),
    #[error("model config: {0}")]
    Config(String),
    #[error("model shape: {0}")]
    Shape(String),
    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("vocabulary fingerprint mismatch: checkpoint expects {expected}, got {actual}")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged {
        step: usize,
        last_good: Box<crate::model::EncoderCheckpoint>,
    },
    #[error("task: {0}")]
    Task(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error("annotation: {0}")]
    Annotation(String),
    #[error("annotation conflict: {0}")]
    Conflict(String),
    #[error("annotation validation: {0}")]
    Validation(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
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
