use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::clock::Instant;

use super::assembly::{Demux, StreamAssembly, StreamSink};
use super::driver::{Capabilities, FrameRx, FrameTx};
use super::{
    check_chunk_size, flags, Frame, ProtocolViolation, SfmError, TransportConfig,
    TransportErrorKind,
};
use crate::meter::{MemoryMeter, Reservation};

/// Number of frames a payload of `len` bytes occupies.
pub fn chunk_frames(len: u64, chunk_size: usize) -> u64 {
    len.div_ceil(chunk_size as u64).max(1)
}

/// Cuts a byte source of known length into frames. Holds no data between
/// calls to `next`, so at most one chunk is alive per yielded frame.
pub struct ChunkIter<R> {
    source: R,
    stream_id: u64,
    chunk_size: usize,
    len: u64,
    offset: u64,
    seq: u32,
    done: bool,
}

impl<R: Read> ChunkIter<R> {
    pub fn new(source: R, len: u64, stream_id: u64, chunk_size: usize) -> Result<Self, SfmError> {
        check_chunk_size(chunk_size)?;
        if chunk_frames(len, chunk_size) > u64::from(u32::MAX) {
            return Err(SfmError::InvalidConfig(format!(
                "{len} bytes exceed the sequence space at chunk size {chunk_size}"
            )));
        }
        Ok(Self {
            source,
            stream_id,
            chunk_size,
            len,
            offset: 0,
            seq: 0,
            done: false,
        })
    }

    /// Numbers frames from `seq`; BEGIN is only set on seq 0, so a later
    /// start continues a stream opened elsewhere.
    pub fn starting_at(mut self, seq: u32) -> Self {
        self.seq = seq;
        self
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }
}

impl<R: Read> Iterator for ChunkIter<R> {
    type Item = Result<Frame, SfmError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let take = (self.len - self.offset).min(self.chunk_size as u64) as usize;
        let mut buf = vec![0u8; take];
        if let Err(e) = self.source.read_exact(&mut buf) {
            self.done = true;
            return Some(Err(SfmError::Source {
                stream_id: self.stream_id,
                offset: self.offset,
                reason: e.to_string(),
            }));
        }
        self.offset += take as u64;
        let mut f = 0;
        if self.seq == 0 {
            f |= flags::BEGIN;
        }
        if self.offset == self.len {
            f |= flags::END;
            self.done = true;
        }
        let frame = Frame::new(self.stream_id, self.seq, f, buf);
        self.seq += 1;
        Some(Ok(frame))
    }
}

/// All frames for an in-memory payload.
pub fn chunk(payload: &[u8], stream_id: u64, chunk_size: usize) -> Result<Vec<Frame>, SfmError> {
    ChunkIter::new(payload, payload.len() as u64, stream_id, chunk_size)?.collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub stream_id: u64,
    pub frames: u64,
    /// Payload bytes, excluding frame headers.
    pub bytes: u64,
    /// Bytes on the wire, frame headers included.
    pub wire_bytes: u64,
    pub elapsed: Duration,
}

impl SendReceipt {
    pub fn new(stream_id: u64) -> Self {
        Self {
            stream_id,
            frames: 0,
            bytes: 0,
            wire_bytes: 0,
            elapsed: Duration::ZERO,
        }
    }

    pub fn record(&mut self, frame: &Frame) {
        self.frames += 1;
        self.bytes += frame.payload.len() as u64;
        self.wire_bytes += frame.wire_len() as u64;
    }

    /// Folds another stream's counts into this one.
    pub fn absorb(&mut self, other: &SendReceipt) {
        self.frames += other.frames;
        self.bytes += other.bytes;
        self.wire_bytes += other.wire_bytes;
    }
}

struct TxShared {
    link: Mutex<Box<dyn FrameTx>>,
    used: Mutex<HashSet<u64>>,
    next_id: AtomicU64,
    frames: AtomicU64,
    bytes: AtomicU64,
}

/// Sending half of a connection. Clones share the link; frame sends are
/// serialized internally.
#[derive(Clone)]
pub struct ConnTx {
    shared: Arc<TxShared>,
    config: TransportConfig,
}

impl std::fmt::Debug for ConnTx {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConnTx")
            .field("frames_sent", &self.frames_sent())
            .finish()
    }
}

impl ConnTx {
    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    /// Marks `stream_id` as used on this connection.
    pub fn claim(&self, stream_id: u64) -> Result<(), SfmError> {
        if self.shared.used.lock().expect("tx lock").insert(stream_id) {
            Ok(())
        } else {
            Err(SfmError::Transport {
                stream_id: Some(stream_id),
                last_seq: None,
                kind: TransportErrorKind::DuplicateStream,
            })
        }
    }

    /// Claims and returns a fresh stream id.
    pub fn next_stream_id(&self) -> u64 {
        loop {
            let id = self.shared.next_id.fetch_add(1, Ordering::Relaxed);
            if self.claim(id).is_ok() {
                return id;
            }
        }
    }

    pub fn send_frame(&self, frame: Frame) -> Result<(), SfmError> {
        let (id, seq, len) = (frame.stream_id, frame.seq, frame.wire_len() as u64);
        self.shared
            .link
            .lock()
            .expect("tx lock")
            .send(frame)
            .map_err(|kind| SfmError::Transport {
                stream_id: Some(id),
                last_seq: seq.checked_sub(1),
                kind,
            })?;
        self.shared.frames.fetch_add(1, Ordering::Relaxed);
        self.shared.bytes.fetch_add(len, Ordering::Relaxed);
        Ok(())
    }

    pub fn frames_sent(&self) -> u64 {
        self.shared.frames.load(Ordering::Relaxed)
    }

    /// Wire bytes handed to the driver so far, headers included.
    pub fn bytes_sent(&self) -> u64 {
        self.shared.bytes.load(Ordering::Relaxed)
    }

    pub fn close(&self) {
        self.shared.link.lock().expect("tx lock").close();
    }
}

/// Receiving half of a connection.
pub struct ConnRx {
    link: Box<dyn FrameRx>,
    config: TransportConfig,
    frames: u64,
    bytes: u64,
}

impl std::fmt::Debug for ConnRx {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConnRx")
            .field("frames_received", &self.frames)
            .finish()
    }
}

impl ConnRx {
    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    /// Next frame, or `StreamTimeout` naming `waiting_on` after the idle
    /// limit.
    pub fn recv_frame_for(&mut self, waiting_on: Option<u64>) -> Result<Frame, SfmError> {
        match self.link.recv(self.config.timeout())? {
            Some(frame) => {
                self.frames += 1;
                self.bytes += frame.wire_len() as u64;
                Ok(frame)
            }
            None => Err(SfmError::StreamTimeout {
                stream_id: waiting_on,
                idle_ms: self.config.timeout_ms,
            }),
        }
    }

    pub fn recv_frame(&mut self) -> Result<Frame, SfmError> {
        self.recv_frame_for(None)
    }

    pub fn frames_received(&self) -> u64 {
        self.frames
    }

    /// Wire bytes received so far, headers included.
    pub fn bytes_received(&self) -> u64 {
        self.bytes
    }
}

/// A duplex link produced by a driver.
pub struct Connection {
    pub tx: ConnTx,
    pub rx: ConnRx,
    capabilities: Capabilities,
}

impl Connection {
    pub fn new(
        tx: Box<dyn FrameTx>,
        rx: Box<dyn FrameRx>,
        capabilities: Capabilities,
        config: TransportConfig,
    ) -> Self {
        Self {
            tx: ConnTx {
                shared: Arc::new(TxShared {
                    link: Mutex::new(tx),
                    used: Mutex::new(HashSet::new()),
                    next_id: AtomicU64::new(1),
                    frames: AtomicU64::new(0),
                    bytes: AtomicU64::new(0),
                }),
                config,
            },
            rx: ConnRx {
                link: rx,
                config,
                frames: 0,
                bytes: 0,
            },
            capabilities,
        }
    }

    pub fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    pub fn config(&self) -> &TransportConfig {
        &self.tx.config
    }

    pub fn split(self) -> (ConnTx, ConnRx) {
        (self.tx, self.rx)
    }
}

/// Streams `len` bytes from `source` as `stream_id`. Each chunk is charged
/// to `meter` from the moment it is read until the driver takes the frame.
pub fn send_object<R: Read>(
    tx: &ConnTx,
    stream_id: u64,
    source: R,
    len: u64,
    meter: Option<&MemoryMeter>,
) -> Result<SendReceipt, SfmError> {
    let started = Instant::now();
    let chunk_size = tx.config.chunk_size;
    let mut frames = ChunkIter::new(source, len, stream_id, chunk_size)?;
    tx.claim(stream_id)?;
    let mut receipt = SendReceipt::new(stream_id);
    loop {
        let take = (len - frames.offset()).min(chunk_size as u64);
        let _hold = Reservation::new(meter, take);
        let Some(frame) = frames.next() else { break };
        let frame = frame?;
        receipt.record(&frame);
        tx.send_frame(frame)?;
    }
    receipt.elapsed = started.elapsed();
    Ok(receipt)
}

/// Sends several in-memory payloads over one connection, one frame from
/// each stream in turn.
pub fn send_interleaved(
    tx: &ConnTx,
    streams: &[(u64, &[u8])],
) -> Result<Vec<SendReceipt>, SfmError> {
    let started = Instant::now();
    let chunk_size = tx.config.chunk_size;
    let mut iters = Vec::with_capacity(streams.len());
    for &(id, payload) in streams {
        iters.push(ChunkIter::new(payload, payload.len() as u64, id, chunk_size)?);
    }
    for &(id, _) in streams {
        tx.claim(id)?;
    }
    let mut receipts: Vec<SendReceipt> = streams.iter().map(|&(id, _)| SendReceipt::new(id)).collect();
    let mut live = iters.len();
    while live > 0 {
        live = 0;
        for (it, receipt) in iters.iter_mut().zip(&mut receipts) {
            if let Some(frame) = it.next() {
                let frame = frame?;
                receipt.record(&frame);
                tx.send_frame(frame)?;
                live += 1;
            }
        }
    }
    for r in &mut receipts {
        r.elapsed = started.elapsed();
    }
    Ok(receipts)
}

/// Receives one whole stream into `sink`. Frames are handed to the sink as
/// they arrive, so with a streaming sink only one chunk is buffered here;
/// that chunk is charged to `meter` while it is handled.
pub fn receive_object(
    rx: &mut ConnRx,
    sink: &mut dyn StreamSink,
    meter: Option<&MemoryMeter>,
) -> Result<SendReceipt, SfmError> {
    let started = Instant::now();
    let first = rx.recv_frame()?;
    let id = first.stream_id;
    let mut assembly = StreamAssembly::new(id, rx.config.chunk_size);
    let mut receipt = SendReceipt::new(id);
    let mut next = Some(first);
    loop {
        let frame = match next.take() {
            Some(f) => f,
            None => rx.recv_frame_for(Some(id))?,
        };
        if frame.stream_id != id {
            return Err(SfmError::protocol(
                id,
                ProtocolViolation::Interleaved(frame.stream_id),
            ));
        }
        let _hold = Reservation::new(meter, frame.payload.len() as u64);
        let frame = assembly.accept(frame)?;
        receipt.record(&frame);
        sink.accept(&frame).map_err(|reason| SfmError::Sink {
            stream_id: id,
            reason,
        })?;
        if frame.is_end() {
            break;
        }
    }
    receipt.elapsed = started.elapsed();
    Ok(receipt)
}

/// Receives `count` possibly interleaved streams into memory, keyed by
/// stream id.
pub fn receive_many(rx: &mut ConnRx, count: usize) -> Result<BTreeMap<u64, Vec<u8>>, SfmError> {
    let mut demux = Demux::new(rx.config.chunk_size);
    let mut out: BTreeMap<u64, Vec<u8>> = BTreeMap::new();
    let mut done = 0;
    while done < count {
        let waiting = demux.open_streams().min();
        let frame = demux.accept(rx.recv_frame_for(waiting)?)?;
        out.entry(frame.stream_id)
            .or_default()
            .extend_from_slice(&frame.payload);
        if frame.is_end() {
            done += 1;
        }
        if let Some(id) = demux.expired(rx.config.timeout()) {
            return Err(SfmError::StreamTimeout {
                stream_id: Some(id),
                idle_ms: rx.config.timeout_ms,
            });
        }
    }
    Ok(out)
}
