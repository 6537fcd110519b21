use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TmfError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("non-finite sample at position {position} (1-based)")]
    NonFiniteSample { position: usize },

    #[error("frame length {length} exceeds series length {available}")]
    FrameTooLong { length: usize, available: usize },

    #[error("series of length {0} is too short (need at least 3 samples)")]
    SeriesTooShort(usize),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("bad target shape: {0}")]
    BadTargetShape(String),

    #[error("input too small for the extractor: {0}")]
    ShapeTooSmall(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(&'static str),

    #[error("patient {0} has no frames")]
    EmptyPatient(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("failed to write {path}: {source}")]
    WriteFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TmfError {
    pub(crate) fn write_failure(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TmfError::WriteFailure {
            path: path.into(),
            source,
        }
    }

    /// Coarse grouping used for process exit codes: data problems versus
    /// everything else.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            TmfError::FileNotFound(_)
                | TmfError::MalformedInput(_)
                | TmfError::NonFiniteSample { .. }
                | TmfError::FrameTooLong { .. }
                | TmfError::SeriesTooShort(_)
                | TmfError::EmptySplit(_)
                | TmfError::DegenerateLabels(_)
                | TmfError::EmptyPatient(_)
                | TmfError::EmptyDataset
        )
    }
}

pub type Result<T> = std::result::Result<T, TmfError>;
