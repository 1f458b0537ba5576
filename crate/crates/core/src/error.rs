use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vocabulary file {0} contains no tokens")]
    VocabularyEmpty(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("token is empty after canonicalization")]
    EmptyToken,

    #[error("schema error in clip {clip_id}: {field}")]
    Schema { clip_id: String, field: String },
    #[error("clip {clip_id}, action {action_idx}: unknown label token {token:?}")]
    UnknownLabel {
        clip_id: String,
        action_idx: usize,
        token: String,
    },
    #[error("at least one observed action is required")]
    NoObservedActions,
    #[error("clip {clip_id} has too few actions around anchor {anchor}")]
    InsufficientContext { clip_id: String, anchor: usize },
    #[error("missing narration for action {0}")]
    MissingNarration(usize),

    #[error("embedding dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("embedding is invalid: {0}")]
    InvalidEmbedding(&'static str),
    #[error("no candidates to select from")]
    NoCandidates,

    #[error("example does not match prompt configuration: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backend unavailable (sample {sample:?}): {reason}")]
    BackendUnavailable { sample: Option<usize>, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("input text is empty")]
    EmptyInput,

    #[error("both sequences are empty")]
    EmptySequences,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("regressor is constant")]
    DegenerateRegressor,
    #[error("regression needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("incomplete run: no matching record for clip {clip_id} anchor {anchor}")]
    IncompleteRun { clip_id: String, anchor: usize },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(clip_id: impl Into<String>, field: impl Into<String>) -> Self {
        Error::Schema {
            clip_id: clip_id.into(),
            field: field.into(),
        }
    }

    /// Configuration and IO failures, as opposed to failures of a run in progress.
    pub fn is_config_or_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Json { .. }
                | Error::Config(_)
                | Error::VocabularyEmpty(_)
                | Error::Schema { .. }
                | Error::UnknownLabel { .. }
        )
    }
}
