//! Streamable framed messages.
//!
//! Payloads of any size are cut into frames of at most 1 MiB, multiplexed by
//! stream id over a driver connection and reassembled on the far side. A
//! frame is a 24-byte little-endian header followed by its payload:
//!
//! ```text
//! magic u16 ("SF") | version u8 | flags u8 | stream_id u64 | seq u32 |
//! payload_len u32 | crc32 u32 | payload
//! ```

mod assembly;
mod conn;
mod driver;
mod frame;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assembly::{AssemblyState, Demux, StreamAssembly, StreamSink, VecSink};
pub use conn::{
    chunk, chunk_frames, receive_many, receive_object, send_interleaved, send_object, ChunkIter,
    ConnRx, ConnTx, Connection, SendReceipt,
};
pub use driver::{
    memory_pair, Acceptor, Capabilities, Driver, FrameRx, FrameTx, MemoryAcceptor, MemoryDriver,
    TcpAcceptor, TcpDriver,
};
pub use frame::{Frame, FRAME_MAGIC, FRAME_VERSION, HEADER_LEN};

pub const MIN_CHUNK: usize = 4 << 10;
pub const MAX_CHUNK: usize = 1 << 20;
pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

/// Frame flag bits.
pub mod flags {
    pub const BEGIN: u8 = 1;
    pub const END: u8 = 1 << 1;
    pub const META: u8 = 1 << 2;
}

/// The `transport` section of a job configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub chunk_size: usize,
    /// Frames a sender may have queued in the driver before `send` blocks.
    pub window: usize,
    /// Idle limit for a stream (and for waiting on the next one).
    pub timeout_ms: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            chunk_size: MAX_CHUNK,
            window: DEFAULT_WINDOW,
            timeout_ms: DEFAULT_TIMEOUT_MS,
        }
    }
}

impl TransportConfig {
    pub fn with_chunk_size(mut self, chunk_size: usize) -> Self {
        self.chunk_size = chunk_size;
        self
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), SfmError> {
        check_chunk_size(self.chunk_size)?;
        if self.window == 0 {
            return Err(SfmError::InvalidConfig("window must be at least 1".into()));
        }
        if self.timeout_ms == 0 {
            return Err(SfmError::InvalidConfig("timeout_ms must be positive".into()));
        }
        Ok(())
    }
}

pub fn check_chunk_size(chunk_size: usize) -> Result<(), SfmError> {
    if (MIN_CHUNK..=MAX_CHUNK).contains(&chunk_size) {
        Ok(())
    } else {
        Err(SfmError::InvalidConfig(format!(
            "chunk_size {chunk_size} outside [{MIN_CHUNK}, {MAX_CHUNK}]"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolViolation {
    #[error("gap at {expected} (got seq {found})")]
    Gap { expected: u32, found: u32 },
    #[error("seq regressed to {found}, expected {expected}")]
    Regression { expected: u32, found: u32 },
    #[error("END before BEGIN")]
    EndBeforeBegin,
    #[error("first frame is not flagged BEGIN")]
    MissingBegin,
    #[error("BEGIN on seq {0}")]
    BeginNotFirst(u32),
    #[error("frame {seq} carries {len} bytes, chunk size is {chunk_size}")]
    ShortChunk { seq: u32, len: usize, chunk_size: usize },
    #[error("frame after END")]
    AfterEnd,
    #[error("frame from stream {0} interleaved into a single-stream receive")]
    Interleaved(u64),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportErrorKind {
    #[error("duplicate stream")]
    DuplicateStream,
    #[error("connection closed")]
    Closed,
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SfmError {
    #[error("stream {stream_id}: frame {seq} failed its CRC check")]
    FrameCorrupt { stream_id: u64, seq: u32 },
    #[error("stream {stream_id}: protocol error: {violation}")]
    Protocol {
        stream_id: u64,
        violation: ProtocolViolation,
    },
    #[error("stream {stream_id:?} idle for {idle_ms} ms")]
    StreamTimeout { stream_id: Option<u64>, idle_ms: u64 },
    #[error("transport error on stream {stream_id:?} (last sent seq {last_seq:?}): {kind}")]
    Transport {
        stream_id: Option<u64>,
        last_seq: Option<u32>,
        kind: TransportErrorKind,
    },
    #[error("malformed frame header: {0}")]
    MalformedFrame(String),
    #[error("invalid transport config: {0}")]
    InvalidConfig(String),
    #[error("stream {stream_id}: sink rejected data: {reason}")]
    Sink { stream_id: u64, reason: String },
    #[error("stream {stream_id}: source read failed at offset {offset}: {reason}")]
    Source {
        stream_id: u64,
        offset: u64,
        reason: String,
    },
}

impl SfmError {
    pub fn protocol(stream_id: u64, violation: ProtocolViolation) -> Self {
        SfmError::Protocol {
            stream_id,
            violation,
        }
    }

    pub(crate) fn transport(kind: TransportErrorKind) -> Self {
        SfmError::Transport {
            stream_id: None,
            last_seq: None,
            kind,
        }
    }
}
