use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::time::Duration;

use crate::clock::Instant;

use super::{Frame, ProtocolViolation, SfmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssemblyState {
    Open,
    Complete,
    Failed,
}

/// Receive-side checks for one stream: CRC, contiguous sequence numbers,
/// BEGIN/END placement and the full-chunk rule. Payload handling is left to
/// the caller, which receives each frame back once it has been accepted.
#[derive(Debug)]
pub struct StreamAssembly {
    stream_id: u64,
    chunk_size: usize,
    expected_seq: u32,
    received_bytes: u64,
    state: AssemblyState,
    last_activity: Instant,
}

impl StreamAssembly {
    pub fn new(stream_id: u64, chunk_size: usize) -> Self {
        Self {
            stream_id,
            chunk_size,
            expected_seq: 0,
            received_bytes: 0,
            state: AssemblyState::Open,
            last_activity: Instant::now(),
        }
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn state(&self) -> AssemblyState {
        self.state
    }

    pub fn expected_seq(&self) -> u32 {
        self.expected_seq
    }

    pub fn received_bytes(&self) -> u64 {
        self.received_bytes
    }

    pub fn idle_for(&self, now: Instant) -> Duration {
        now.saturating_duration_since(self.last_activity)
    }

    pub fn accept(&mut self, frame: Frame) -> Result<Frame, SfmError> {
        let result = self.check(&frame);
        match result {
            Ok(()) => {
                self.expected_seq += 1;
                self.received_bytes += frame.payload.len() as u64;
                self.last_activity = Instant::now();
                if frame.is_end() {
                    self.state = AssemblyState::Complete;
                }
                Ok(frame)
            }
            Err(e) => {
                self.state = AssemblyState::Failed;
                Err(e)
            }
        }
    }

    fn check(&self, frame: &Frame) -> Result<(), SfmError> {
        let violation = |v| Err(SfmError::protocol(self.stream_id, v));
        match self.state {
            AssemblyState::Open => {}
            AssemblyState::Complete => return violation(ProtocolViolation::AfterEnd),
            AssemblyState::Failed => {
                return violation(ProtocolViolation::Other("stream already failed".into()))
            }
        }
        if !frame.crc_ok() {
            return Err(SfmError::FrameCorrupt {
                stream_id: self.stream_id,
                seq: frame.seq,
            });
        }
        if self.expected_seq == 0 && !frame.is_begin() {
            return violation(if frame.is_end() {
                ProtocolViolation::EndBeforeBegin
            } else {
                ProtocolViolation::MissingBegin
            });
        }
        let (expected, found) = (self.expected_seq, frame.seq);
        if found > expected {
            return violation(ProtocolViolation::Gap { expected, found });
        }
        if found < expected {
            return violation(ProtocolViolation::Regression { expected, found });
        }
        if found > 0 && frame.is_begin() {
            return violation(ProtocolViolation::BeginNotFirst(found));
        }
        let len = frame.payload.len();
        let sized = if frame.is_meta() {
            true
        } else if frame.is_end() {
            len <= self.chunk_size
        } else {
            len == self.chunk_size
        };
        if !sized {
            return violation(ProtocolViolation::ShortChunk {
                seq: found,
                len,
                chunk_size: self.chunk_size,
            });
        }
        Ok(())
    }
}

/// Consumer of accepted frames for one stream.
pub trait StreamSink {
    fn accept(&mut self, frame: &Frame) -> Result<(), String>;
}

impl<W: Write> StreamSink for W {
    fn accept(&mut self, frame: &Frame) -> Result<(), String> {
        self.write_all(&frame.payload).map_err(|e| e.to_string())
    }
}

/// Accumulates a stream's payload in memory.
pub type VecSink = Vec<u8>;

/// Routes frames of interleaved streams to per-stream assemblies.
#[derive(Debug)]
pub struct Demux {
    chunk_size: usize,
    open: HashMap<u64, StreamAssembly>,
    finished: HashSet<u64>,
}

impl Demux {
    pub fn new(chunk_size: usize) -> Self {
        Self {
            chunk_size,
            open: HashMap::new(),
            finished: HashSet::new(),
        }
    }

    /// Validates `frame` against its stream. After an END frame is accepted
    /// the stream is closed; later frames for it are protocol errors.
    pub fn accept(&mut self, frame: Frame) -> Result<Frame, SfmError> {
        let id = frame.stream_id;
        if self.finished.contains(&id) {
            return Err(SfmError::protocol(id, ProtocolViolation::AfterEnd));
        }
        let assembly = self
            .open
            .entry(id)
            .or_insert_with(|| StreamAssembly::new(id, self.chunk_size));
        let frame = match assembly.accept(frame) {
            Ok(f) => f,
            Err(e) => {
                self.open.remove(&id);
                self.finished.insert(id);
                return Err(e);
            }
        };
        if frame.is_end() {
            self.open.remove(&id);
            self.finished.insert(id);
        }
        Ok(frame)
    }

    pub fn open_streams(&self) -> impl Iterator<Item = u64> + '_ {
        self.open.keys().copied()
    }

    /// The longest-idle open stream, if it has been idle for `limit`.
    pub fn expired(&self, limit: Duration) -> Option<u64> {
        let now = Instant::now();
        self.open
            .values()
            .filter(|a| a.idle_for(now) >= limit)
            .max_by_key(|a| a.idle_for(now))
            .map(StreamAssembly::stream_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::flags::{BEGIN, END, META};

    const C: usize = 4096;

    fn f(seq: u32, flags: u8, len: usize) -> Frame {
        Frame::new(5, seq, flags, vec![seq as u8; len])
    }

    #[test]
    fn accepts_well_formed_stream() {
        let mut a = StreamAssembly::new(5, C);
        a.accept(f(0, BEGIN, C)).unwrap();
        a.accept(f(1, 0, C)).unwrap();
        assert_eq!(a.state(), AssemblyState::Open);
        a.accept(f(2, END, 10)).unwrap();
        assert_eq!(a.state(), AssemblyState::Complete);
        assert_eq!(a.received_bytes(), 2 * C as u64 + 10);
        assert_eq!(a.expected_seq(), 3);
        let err = a.accept(f(3, 0, C)).unwrap_err();
        assert!(matches!(err, SfmError::Protocol { violation: ProtocolViolation::AfterEnd, .. }));
    }

    #[test]
    fn single_empty_frame() {
        let mut a = StreamAssembly::new(5, C);
        a.accept(f(0, BEGIN | END, 0)).unwrap();
        assert_eq!(a.state(), AssemblyState::Complete);
    }

    #[test]
    fn rejects_gap_regression_and_missing_begin() {
        let mut a = StreamAssembly::new(5, C);
        a.accept(f(0, BEGIN, C)).unwrap();
        let err = a.accept(f(2, END, 1)).unwrap_err();
        assert_eq!(
            err,
            SfmError::protocol(5, ProtocolViolation::Gap { expected: 1, found: 2 })
        );
        assert_eq!(a.state(), AssemblyState::Failed);

        let mut a = StreamAssembly::new(5, C);
        a.accept(f(0, BEGIN, C)).unwrap();
        a.accept(f(1, 0, C)).unwrap();
        assert!(matches!(
            a.accept(f(0, 0, C)).unwrap_err(),
            SfmError::Protocol { violation: ProtocolViolation::Regression { expected: 2, found: 0 }, .. }
        ));

        let mut a = StreamAssembly::new(5, C);
        assert_eq!(
            a.accept(f(0, END, 3)).unwrap_err(),
            SfmError::protocol(5, ProtocolViolation::EndBeforeBegin)
        );
        let mut a = StreamAssembly::new(5, C);
        assert_eq!(
            a.accept(f(0, 0, C)).unwrap_err(),
            SfmError::protocol(5, ProtocolViolation::MissingBegin)
        );
    }

    #[test]
    fn corrupt_frame_names_its_seq() {
        let mut a = StreamAssembly::new(5, C);
        for seq in 0..3 {
            a.accept(f(seq, if seq == 0 { BEGIN } else { 0 }, C)).unwrap();
        }
        let mut bad = f(3, 0, C);
        bad.payload[7] ^= 0x40;
        assert_eq!(
            a.accept(bad).unwrap_err(),
            SfmError::FrameCorrupt { stream_id: 5, seq: 3 }
        );
        assert_eq!(a.state(), AssemblyState::Failed);
    }

    #[test]
    fn chunk_rule_exempts_meta_and_end() {
        let mut a = StreamAssembly::new(5, C);
        a.accept(f(0, BEGIN | META, 17)).unwrap();
        a.accept(f(1, 0, C)).unwrap();
        assert!(matches!(
            a.accept(f(2, 0, C - 1)).unwrap_err(),
            SfmError::Protocol { violation: ProtocolViolation::ShortChunk { seq: 2, .. }, .. }
        ));
        let mut a = StreamAssembly::new(5, C);
        assert!(a.accept(f(0, BEGIN | END, C + 1)).is_err());
    }

    #[test]
    fn demux_routes_interleaved_streams() {
        let mut d = Demux::new(C);
        let a0 = Frame::new(1, 0, BEGIN, vec![1; C]);
        let b0 = Frame::new(2, 0, BEGIN | END, vec![2; 3]);
        let a1 = Frame::new(1, 1, END, vec![1; 5]);
        d.accept(a0).unwrap();
        assert!(d.accept(b0).unwrap().is_end());
        assert_eq!(d.open_streams().collect::<Vec<_>>(), [1]);
        assert!(d.accept(a1).unwrap().is_end());
        assert_eq!(d.open_streams().count(), 0);
        assert!(d.accept(Frame::new(2, 1, END, vec![])).is_err());
        assert_eq!(d.expired(Duration::ZERO), None);
    }
}
