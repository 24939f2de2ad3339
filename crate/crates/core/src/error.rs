use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("matrix is singular or too ill-conditioned to invert")]
    SingularMatrix,

    #[error("matrix contains a non-finite entry")]
    NonFinite,

    #[error("loss must be a 1x1 value, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("enumeration over {n} units exceeds the limit of {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("empty sentence")]
    EmptySentence,

    #[error("empty document")]
    EmptyDocument,

    #[error("empty input")]
    EmptyInput,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("attention mode at the {0} level is not structured")]
    ModeMismatch(&'static str),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
