//! Single-file, page-organized dataset container and a multithreaded batch
//! loader built around it.
//!
//! The pure pieces (layout, codecs, orders, cache planning, transform
//! pipeline) compile everywhere. File access, the threaded loader and the
//! benchmark harness sit behind the default `io` feature.

pub mod alloc;
pub mod cache;
pub mod codecs;
pub mod format;
pub mod memory;
pub mod pipeline;
pub mod rng;
pub mod source;
pub mod traversal;

#[cfg(feature = "io")]
pub mod bench;
#[cfg(feature = "io")]
pub mod loader;
#[cfg(feature = "io")]
pub mod reader;
#[cfg(feature = "io")]
pub mod writer;

pub use cache::{CacheStats, PageSchedule};
pub use codecs::{CodecId, Image};
pub use format::{DatasetHeader, FieldDescriptor, FieldType};
pub use source::{FieldValue, SampleSource};
pub use traversal::{OrderKind, TraversalOrder};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Codec(#[from] codecs::CodecError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    CapacityTooSmall(#[from] cache::CapacityTooSmall),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("source error at sample {index}: {message}")]
    Source { index: u64, message: String },
    #[error("invalid file: {0}")]
    InvalidFile(String),
    #[error("index {index} out of range for {len} samples")]
    IndexOutOfRange { index: u64, len: u64 },
    #[error("page {0} is not resident")]
    PageNotResident(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sample {index} (batch position {position}) failed: {message}")]
    SampleFailed {
        index: u64,
        position: usize,
        message: String,
    },
    #[error("loader shut down")]
    Shutdown,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
