use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("invalid store: {0}")]
    InvalidStore(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("split {0:?} has no pairs")]
    EmptySplit(String),

    #[error("batch size must be at least 2, got {0}")]
    BatchSize(usize),

    #[error("node {node} out of range for depth {depth}")]
    OutOfRange { node: usize, depth: usize },

    #[error("level {0} out of range for depth {1}")]
    LevelOutOfRange(usize, usize),

    #[error("assignment level mismatch: {0} vs {1}")]
    LevelMismatch(usize, usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("batch of {0} is too small for in-batch negatives")]
    BatchTooSmall(usize),

    #[error("missing level {0} in model output")]
    MissingLevel(usize),

    #[error("metric mismatch: index uses {index}, query uses {query}")]
    MetricMismatch { index: String, query: String },

    #[error("query {0} has no ground-truth context")]
    MissingGt(usize),

    #[error("need at least 2 contexts, got {0}")]
    TooFewContexts(usize),

    #[error("operation requires a {0} cluster tree")]
    WrongKind(&'static str),

    #[error("model has no node embeddings")]
    NoNodeEmbeddings,

    #[error("node {0} has no contexts in its subtree")]
    EmptySubtree(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
