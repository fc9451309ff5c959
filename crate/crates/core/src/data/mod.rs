//! Task streams, the synthetic attribute-structured generator, the binary
//! embedding-file format and learner checkpoints.

mod checkpoint;
mod embfile;
mod stream;
mod synthetic;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embfile::{
    read_embedding_file, write_embedding_file, EmbeddingFile, EmbeddingRecord, EMBEDDING_MAGIC,
    EMBEDDING_VERSION,
};
pub use stream::{Dataset, Task, TaskSource, TaskStream};
pub use synthetic::{generate_synthetic, generate_synthetic_pair, SyntheticSpec};

use thiserror::Error;

use crate::encoders::{ClassId, EncoderError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(
        "could not draw {wanted} attribute directions with pairwise cosine < 0.5 in {draws} draws; \
         try a larger feature_dim"
    )]
    RejectionExhausted { wanted: usize, draws: usize },
    #[error("file truncated: header implies {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("file has {extra} trailing bytes beyond the header-implied length {expected}")]
    TrailingBytes { expected: u64, extra: u64 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("record {record} has label {label} but the file declares {num_classes} classes")]
    LabelOutOfRange {
        record: usize,
        label: u32,
        num_classes: u32,
    },
    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("class {0} appears in more than one task")]
    OverlappingClasses(ClassId),
    #[error("sample labelled {label} is not in task {task}'s class set")]
    ForeignLabel { task: usize, label: ClassId },
    #[error("no class token for class {0}")]
    MissingClassToken(ClassId),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
