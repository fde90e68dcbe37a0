use std::io;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: {detail}")]
    Dimension {
        op: &'static str,
        axis: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("alignment error: audio has {audio} steps, video has {video}")]
    Alignment { audio: usize, video: usize },

    #[error("coverage error: {missing} ground-truth rows have no prediction (first keys: {examples})")]
    Coverage { missing: usize, examples: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: usize, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axis,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
