use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty answer set for question {0}")]
    EmptyAnswerSet(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("answer vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("index fingerprint does not match encoder checkpoint")]
    FingerprintMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown document id: {0}")]
    UnknownDoc(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
}

pub type Result<T> = std::result::Result<T, Error>;
