//! Positional file streams and the disk engines behind a session.
//!
//! A session owns one [`DiskEngine`]. In [`DiskEngineMode::Sync`] every read
//! and write happens inline on the session thread. In
//! [`DiskEngineMode::Async`] a dedicated disk thread drains a bounded
//! [`RingBuffer`] of write requests (merging adjacent ones into single gather
//! writes) or prefetches blocks for a sender, and hands completions back.

mod engine;
mod ring;
mod stream;
mod target;

use std::fmt;
use std::io;
use std::str::FromStr;

pub use engine::{BatchRecord, Completion, DiskEngine, EngineStats, ReadOutcome, WriteOutcome};
pub use ring::{flush_coalesced, FlushReport, RingBuffer, TryPush};
pub use stream::{null_stream, open_stream, zero_stream, FileStream, StreamMode};
pub use target::Target;

/// Default ring capacity, in requests (one block each).
pub const DEFAULT_RING_SLOTS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("no such file: {0}")]
    NotFound(String),
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("offset {offset} beyond end of stream ({size} bytes)")]
    OutOfRange { offset: u64, size: u64 },
    #[error("invalid stream mode: {0}")]
    InvalidMode(&'static str),
    #[error("empty write request")]
    EmptyWrite,
    #[error("ring buffer closed")]
    BufferClosed,
    #[error("disk engine failed: {0}")]
    EngineFailed(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, StorageError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiskEngineMode {
    #[default]
    Sync,
    Async,
}

impl fmt::Display for DiskEngineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiskEngineMode::Sync => "sync",
            DiskEngineMode::Async => "async",
        })
    }
}

impl FromStr for DiskEngineMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sync" => Ok(DiskEngineMode::Sync),
            "async" => Ok(DiskEngineMode::Async),
            other => Err(format!("unknown disk mode {other:?} (expected sync or async)")),
        }
    }
}

/// One positional write destined for the disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WriteRequest {
    pub offset: u64,
    pub data: Vec<u8>,
}

impl WriteRequest {
    pub fn new(offset: u64, data: Vec<u8>) -> Result<Self> {
        if data.is_empty() {
            return Err(StorageError::EmptyWrite);
        }
        Ok(WriteRequest { offset, data })
    }

    pub fn end(&self) -> u64 {
        self.offset + self.data.len() as u64
    }
}
