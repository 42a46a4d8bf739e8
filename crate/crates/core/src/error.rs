use thiserror::Error;

/// Errors shared across the tensor engine, network graph, and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("channel mismatch in {op}: expected {expected}, got {got}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by op `{op}` (node {node})")]
    NonFinite { op: String, node: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("channel partition {groups:?} does not cover {channels} channels")]
    BadPartition {
        groups: Vec<usize>,
        channels: usize,
    },

    #[error("unknown attachment site `{0}`")]
    UnknownSite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
