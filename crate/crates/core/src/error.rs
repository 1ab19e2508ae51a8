use thiserror::Error;
use tubestream_tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index {index} out of range (length {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("memory partition {0} is empty")]
    EmptyPartition(usize),
    #[error("partition {k} does not exist (bank has {partitions})")]
    NoPartition { k: usize, partitions: usize },
    #[error("frame {got} presented out of order (expected {expected})")]
    OutOfOrder { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid segment ({0}, {1})")]
    Segment(usize, usize),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("unknown {kind} strategy {name:?} (known: {known})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
