use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("kv-cache capacity exceeded: {needed} tokens requested, capacity {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("kv-cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid image: {0}")]
    Image(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding a checkpoint file. Each corruption mode has its
/// own variant so callers can tell them apart.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateTensor(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("unknown dtype tag {tag} for tensor `{name}`")]
    Dtype { name: String, tag: u8 },

    #[error("invalid tensor name: {0}")]
    Name(String),

    #[error("embedded config: {0}")]
    Config(String),
}
