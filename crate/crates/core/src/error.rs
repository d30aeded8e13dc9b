//! Error type shared by every pipeline stage.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("test case `{id}` has no non-blank lines")]
    AllLinesBlank { id: String },

    #[error("test case `{id}`: unparseable failure timestamp `{value}`")]
    BadTimestamp { id: String, value: String },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("duplicate test id `{0}`")]
    DuplicateId(String),

    #[error("invalid test case `{id}`: {reason}")]
    InvalidTestCase { id: String, reason: String },

    #[error("unknown test id `{0}`")]
    UnknownId(String),

    #[error("chunk window {window} must exceed overlap {overlap}")]
    InvalidWindow { window: usize, overlap: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no embedding for test `{0}`")]
    MissingEmbedding(String),

    #[error("embedder `{embedder}` failed on `{test_id}`: {reason}")]
    Embedding {
        embedder: String,
        test_id: String,
        reason: String,
    },

    #[error("malformed embedding sidecar: {0}")]
    MalformedSidecar(String),

    #[error("fault pattern set is empty")]
    EmptyPatternSet,

    #[error("labels of query `{0}` were requested during its own query")]
    LabelLeak(String),

    #[error("k = {k} exceeds the {lines} lines of the query")]
    KTooLarge { k: usize, lines: usize },

    #[error("transport error after {attempts} attempt(s): {reason}")]
    Transport { attempts: usize, reason: String },

    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: usize },

    #[error("model returned an empty response")]
    EmptyResponse,

    #[error("no replay fixture for prompt hash {0}")]
    MissingFixture(String),

    #[error("no element ids could be parsed from the response")]
    Unparseable,

    #[error("evaluation run has no queries")]
    EmptyRun,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags the error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The error beneath any stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Stage name, when tagged.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
