use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure category, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Validation,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("gradient requested for a value that is not a scalar (shape {shape:?})")]
    NotScalar { shape: Vec<usize> },

    #[error("value does not belong to this tape")]
    ForeignVar,

    #[error("invalid encoder config: {0}")]
    EncoderConfig(String),

    #[error("missing parameter tensor `{0}`")]
    MissingParam(String),

    #[error("invalid progression level {0}")]
    InvalidLevel(f64),

    #[error("progression level 1.0 has no weighting coefficient")]
    AlphaForTerminalLevel,

    #[error("invalid loss input: {0}")]
    LossInput(String),

    #[error("invalid cohort: {0}")]
    Cohort(String),

    #[error("participant {participant} has {scans} scans between first MCI and first AD; at most 10 fit the level scale")]
    WindowTooLong { participant: String, scans: usize },

    #[error("participant {0} is not a progressive-MCI participant")]
    NotProgressive(String),

    #[error("not enough participants to build disjoint pools: {0}")]
    PoolsTooSmall(String),

    #[error("split overlap: {0}")]
    Overlap(String),

    #[error("invalid bins: {0}")]
    Bins(String),

    #[error("invalid metric input: {0}")]
    Metric(String),

    #[error("invalid t-SNE input: {0}")]
    Tsne(String),

    #[error("perplexity bisection failed for row {row}: reached {reached}, wanted {target}")]
    PerplexityNotReached { row: usize, reached: f64, target: f64 },

    #[error("invalid synthetic cohort config: {0}")]
    SynthConfig(String),

    #[error("invalid training config: {0}")]
    TrainConfig(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unknown scan reference `{0}`")]
    UnknownScan(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Shape { .. } | NotScalar { .. } | ForeignVar | NonFinite { .. } | NonFiniteLoss { .. }
            | PerplexityNotReached { .. } => ErrorKind::Numeric,
            EncoderConfig(_) | SynthConfig(_) | TrainConfig(_) | Config(_) | Json(_) => {
                ErrorKind::Config
            }
            Io { .. } => ErrorKind::Io,
            Csv(e) if e.is_io_error() => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }
}
