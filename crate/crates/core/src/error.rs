use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: String,
        line: usize,
        message: String,
    },
    #[error("dangling endpoint: edge ({src}, {dst}) references an unknown node")]
    DanglingEndpoint { src: i64, dst: i64 },
    #[error("duplicate node id {0}")]
    DuplicateNode(i64),
    #[error("node id {0} out of range")]
    NodeOutOfRange(usize),
    #[error("anchor {0} is not in the node set")]
    AnchorNotInSet(usize),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab too small for specials (max_size {0} < 6)")]
    VocabTooSmall(usize),
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("no edge texts")]
    NoEdgeTexts,
    #[error("empty anchor batch")]
    EmptyBatch,
    #[error("insufficient examples: {0}")]
    InsufficientExamples(String),
    #[error("missing placeholder data: {0}")]
    MissingPlaceholder(String),
    #[error("unlabeled anchor {0}")]
    UnlabeledAnchor(usize),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
