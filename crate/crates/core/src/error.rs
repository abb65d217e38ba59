use std::path::PathBuf;

use crate::transport::TransportError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },

    #[error("unknown {kind} id `{id}`")]
    UnknownId { kind: &'static str, id: String },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("cannot parse canonical strategy text: {0}")]
    CanonicalParse(String),

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value produced in layer `{layer}`")]
    Numeric { layer: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("interaction set yields no training pairs (every instance has equal rewards)")]
    NoTriples,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("k-means needs 1 <= k <= n (k = {k}, n = {n})")]
    InvalidK { k: usize, n: usize },

    #[error("evaluation of instance `{instance}` with context `{context}` failed: {message}")]
    Evaluation {
        instance: String,
        context: String,
        message: String,
    },

    #[error("reflector failed: {0}")]
    Reflector(String),

    #[error("reflector response has no <prompt>...</prompt> block")]
    MissingPromptTags,

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error("no reward available for instance `{instance}` and context `{context}`")]
    MissingReward { instance: String, context: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("environment variable `{0}` is not set")]
    MissingApiKey(String),

    #[error("state conflict: {0}")]
    StateConflict(String),

    #[error("missing artifact {path}: {what}")]
    MissingArtifact { path: PathBuf, what: &'static str },

    #[error("round {round} failed: {source}")]
    RoundFailed {
        round: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error behind stage and round wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::RoundFailed { source, .. } => source.root(),
            e => e,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn at(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
