use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no encodable keywords")]
    NoEncodableKeywords,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("feature `{field}` value {value} out of range (cardinality {cardinality})")]
    FeatureOutOfRange {
        field: String,
        value: u32,
        cardinality: u32,
    },
    #[error("invalid feature schema: {0}")]
    InvalidSchema(String),
    #[error("feature `{0}` is categorical and takes a single value")]
    ExpectedSingleValue(String),
    #[error("zero dimension in {0}")]
    ZeroDimension(&'static str),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("id {id} out of range for table with {rows} rows")]
    IdOutOfRange { id: u32, rows: usize },
    #[error("variant lacks auxiliary head")]
    MissingAuxiliaryHead,
    #[error("feature/schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("single-class labels")]
    SingleClass,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("entity not in this world: {0}")]
    ForeignEntity(String),
    #[error("budget too small for the first selling point")]
    BudgetTooSmall,
    #[error("checkpoint decode error at byte {offset}: {message}")]
    Decode { offset: u64, message: String },
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("vocabulary hash mismatch: checkpoint {expected}, supplied {actual}")]
    VocabularyMismatch { expected: String, actual: String },
    #[error("config key `{key}`: {message}")]
    ConfigKey { key: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
