use thiserror::Error;

use crate::graph::LayerKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("channel mismatch at `{node}`: {detail}")]
    ChannelMismatch { node: String, detail: String },

    #[error("negative dimension at `{node}`: kernel {kernel} exceeds padded input {padded}")]
    NegativeDimension { node: String, kernel: usize, padded: usize },

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("unsupported layer kind {kind:?} at `{node}`: {detail}")]
    UnsupportedKind { node: String, kind: LayerKind, detail: String },

    #[error("invalid block spec: {0}")]
    InvalidSpec(String),

    #[error("path explosion: {count} input-to-node paths exceed cap {cap}")]
    PathExplosion { count: u128, cap: u128 },

    #[error("shape mismatch at `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("non-finite value produced at `{0}`")]
    NonFiniteValue(String),

    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),

    #[error("box regression overflow: exponent argument {0} exceeds 50")]
    OverflowGuard(f64),

    #[error("svd did not converge after {0} sweeps")]
    ConvergenceFailure(usize),

    #[error("classifier head missing: {0}")]
    MissingHead(String),

    #[error("weight store: {0}")]
    WeightStore(String),

    #[error("io: {0}")]
    Io(String),

    #[error("json: {0}")]
    Json(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
