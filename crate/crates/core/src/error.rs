use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called twice on the same graph")]
    BackwardTwice,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("probabilities not normalized: max |sum - 1| = {deviation:e}")]
    NotNormalized { deviation: f64 },

    #[error("{track} statistics are not initialized in layer {layer}")]
    StatsUninitialized { layer: String, track: &'static str },

    #[error("network has not been finalized; record W_q and discrete statistics first")]
    NotFinalized,

    #[error(
        "non-finite loss at epoch {epoch}, iteration {iteration} (tau = {tau:e}, last finite loss = {last_finite_loss:?}); \
         largest parameter magnitudes: {snapshot}"
    )]
    NonFiniteLoss {
        epoch: usize,
        iteration: u64,
        tau: f64,
        last_finite_loss: Option<f64>,
        snapshot: String,
    },

    #[error("parse error in {source_name}: {detail}")]
    Parse { source_name: String, detail: String },

    #[error("bad magic in {source_name}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { source_name: String, expected: u32, found: u32 },

    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error("unknown config key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },

    #[error("model file error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
