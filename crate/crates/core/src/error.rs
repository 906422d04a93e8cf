use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("not enough scenes: need {needed}, have {available}")]
    InsufficientScenes { needed: usize, available: usize },

    #[error("empty cost matrix")]
    EmptyMatrix,

    #[error("infeasible assignment: {0}")]
    Infeasible(String),

    #[error("problem too large for exhaustive search ({0} > 8)")]
    TooLarge(usize),

    #[error("both masks are empty")]
    EmptyMasks,

    #[error("label out of range: {0}")]
    LabelRange(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing weak labels: {0}")]
    MissingWeakLabels(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
