use std::collections::HashSet;
use std::io::Cursor;

use super::modes::{FrameProducer, MeteredFrame, ObjectReceiver};
use super::{Itemized, MemoryMeter, Reservation, StreamError};
use crate::filter::Payload;
use crate::quant::{
    decode_bundle_entry_header, read_bundle_prefix, BundleEntry, BundlePrefix, EntryPrefix,
    QuantizedBundle, FTQB_MAGIC,
};
use crate::sfm::{flags, ChunkIter, Frame, ProtocolViolation, SfmError, StreamAssembly};
use crate::tensor::{
    decode_entry_header, EntryHeader, ParameterMap, Tensor, TensorError, FTNS_MAGIC, FTNS_VERSION,
};
use crate::wire::{FormatError, FormatErrorKind, WireReader};

enum SendState {
    Prefix,
    Start(usize),
    Data {
        index: usize,
        frames: ChunkIter<Cursor<Vec<u8>>>,
        _staged: Reservation,
    },
    Done,
}

/// Sends an [`Itemized`] object one item at a time: a prefix stream, then
/// for each item a stream whose first frame (META) is the item header and
/// whose remaining frames carry the item data. Only the item being sent is
/// serialized.
pub struct ContainerProducer<'a> {
    obj: &'a dyn Itemized,
    ids: Box<dyn FnMut() -> u64 + 'a>,
    chunk_size: usize,
    meter: Option<MemoryMeter>,
    state: SendState,
}

impl<'a> ContainerProducer<'a> {
    pub fn new(
        obj: &'a dyn Itemized,
        ids: impl FnMut() -> u64 + 'a,
        chunk_size: usize,
        meter: Option<&MemoryMeter>,
    ) -> Self {
        Self {
            obj,
            ids: Box::new(ids),
            chunk_size,
            meter: meter.cloned(),
            state: SendState::Prefix,
        }
    }

    fn metered(&self, frame: Frame) -> MeteredFrame {
        MeteredFrame::new(frame, self.meter.as_ref())
    }
}

impl FrameProducer for ContainerProducer<'_> {
    fn current_entry(&self) -> Option<&str> {
        match &self.state {
            SendState::Data { index, .. } => Some(self.obj.item_name(*index)),
            SendState::Start(i) if *i < self.obj.item_count() => Some(self.obj.item_name(*i)),
            _ => None,
        }
    }
}

impl Iterator for ContainerProducer<'_> {
    type Item = Result<MeteredFrame, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            match &mut self.state {
                SendState::Done => return None,
                SendState::Prefix => {
                    let id = (self.ids)();
                    let frame = Frame::new(id, 0, flags::BEGIN | flags::END | flags::META, self.obj.prefix());
                    self.state = SendState::Start(0);
                    return Some(Ok(self.metered(frame)));
                }
                SendState::Start(i) => {
                    let i = *i;
                    if i == self.obj.item_count() {
                        self.state = SendState::Done;
                        continue;
                    }
                    let name = self.obj.item_name(i);
                    let Some(data) = self.obj.item_data(i) else {
                        self.state = SendState::Done;
                        return Some(Err(TensorError::Unmaterialized(name.to_owned()).into()));
                    };
                    let header = self.obj.item_header(i);
                    // The serialized item: header plus a private copy of the data.
                    let staged = Reservation::new(
                        self.meter.as_ref(),
                        (header.len() + data.len()) as u64,
                    );
                    let data = data.to_vec();
                    let len = data.len() as u64;
                    let id = (self.ids)();
                    let frames = match ChunkIter::new(Cursor::new(data), len, id, self.chunk_size) {
                        Ok(it) => it.starting_at(1),
                        Err(e) => {
                            self.state = SendState::Done;
                            return Some(Err(e.into()));
                        }
                    };
                    let frame = Frame::new(id, 0, flags::BEGIN | flags::META, header);
                    self.state = SendState::Data {
                        index: i,
                        frames,
                        _staged: staged,
                    };
                    return Some(Ok(self.metered(frame)));
                }
                SendState::Data { index, frames, .. } => {
                    let index = *index;
                    let frame = match frames.next().expect("data stream ends with an END frame") {
                        Ok(f) => f,
                        Err(e) => {
                            self.state = SendState::Done;
                            return Some(Err(e.into()));
                        }
                    };
                    if frame.is_end() {
                        self.state = SendState::Start(index + 1);
                    }
                    return Some(Ok(self.metered(frame)));
                }
            }
        }
    }
}

enum Pending {
    Ftns(EntryHeader),
    Bundle(EntryPrefix),
}

impl Pending {
    fn data_len(&self) -> u64 {
        match self {
            Pending::Ftns(h) => h.data_len,
            Pending::Bundle(p) => p.data_len,
        }
    }

    fn name(&self) -> &str {
        match self {
            Pending::Ftns(h) => &h.name,
            Pending::Bundle(p) => &p.name,
        }
    }
}

enum Builder {
    Model(ParameterMap),
    Bundle {
        prefix: BundlePrefix,
        entries: Vec<(String, BundleEntry)>,
        names: HashSet<String>,
    },
}

enum RecvState {
    Prefix,
    Header,
    Data {
        assembly: StreamAssembly,
        pending: Pending,
        buf: Vec<u8>,
    },
    Done,
}

/// Rebuilds a container-streamed object entry by entry. Data frames are
/// appended straight into the destination tensor, so the only transient
/// buffer is the frame being handled.
pub struct ContainerReceiver {
    chunk_size: usize,
    meter: Option<MemoryMeter>,
    state: RecvState,
    builder: Option<Builder>,
    expected: u32,
    received: u32,
    seen_streams: HashSet<u64>,
}

fn no_trailing(r: &WireReader<&[u8]>) -> Result<(), FormatError> {
    if r.remaining() != 0 {
        return Err(r.error(FormatErrorKind::TrailingBytes(r.remaining() as u64)));
    }
    Ok(())
}

impl ContainerReceiver {
    pub fn new(chunk_size: usize, meter: Option<&MemoryMeter>) -> Self {
        Self {
            chunk_size,
            meter: meter.cloned(),
            state: RecvState::Prefix,
            builder: None,
            expected: 0,
            received: 0,
            seen_streams: HashSet::new(),
        }
    }

    fn open_stream(&mut self, frame: Frame) -> Result<(StreamAssembly, Frame), StreamError> {
        let id = frame.stream_id;
        if !self.seen_streams.insert(id) {
            return Err(SfmError::protocol(id, ProtocolViolation::Other("stream id reused".into())).into());
        }
        if !frame.is_meta() {
            return Err(StreamError::Unexpected(format!(
                "stream {id} does not open with a META frame"
            )));
        }
        let mut assembly = StreamAssembly::new(id, self.chunk_size);
        let frame = assembly.accept(frame)?;
        Ok((assembly, frame))
    }

    fn read_prefix(&mut self, payload: &[u8]) -> Result<(), StreamError> {
        let magic = payload.get(..4).unwrap_or_default();
        let mut r = WireReader::from_slice(payload);
        if magic == FTNS_MAGIC {
            r.magic(FTNS_MAGIC)?;
            let v = r.u16()?;
            if v != FTNS_VERSION {
                return Err(r.error(FormatErrorKind::UnsupportedVersion(v)).into());
            }
            self.expected = r.u32()?;
            self.builder = Some(Builder::Model(ParameterMap::new()));
        } else if magic == FTQB_MAGIC {
            let prefix = read_bundle_prefix(&mut r)?;
            self.expected = prefix.entry_count;
            self.builder = Some(Builder::Bundle {
                prefix,
                entries: Vec::new(),
                names: HashSet::new(),
            });
        } else {
            return Err(FormatError {
                offset: 0,
                kind: FormatErrorKind::BadMagic {
                    expected: *FTNS_MAGIC,
                    found: magic.try_into().unwrap_or([0; 4]),
                },
            }
            .into());
        }
        no_trailing(&r)?;
        Ok(())
    }

    fn read_header(&self, payload: &[u8]) -> Result<Pending, StreamError> {
        let mut r = WireReader::from_slice(payload);
        let pending = match self.builder.as_ref().expect("prefix read first") {
            Builder::Model(_) => Pending::Ftns(decode_entry_header(&mut r)?),
            Builder::Bundle { prefix, .. } => {
                Pending::Bundle(decode_bundle_entry_header(&mut r, prefix.precision)?)
            }
        };
        no_trailing(&r)?;
        Ok(pending)
    }

    fn complete_entry(&mut self, pending: Pending, data: Vec<u8>) -> Result<(), StreamError> {
        let index = self.received;
        match self.builder.as_mut().expect("prefix read first") {
            Builder::Model(model) => {
                let Pending::Ftns(h) = pending else { unreachable!() };
                let tensor = Tensor::new(h.dtype, h.shape, data)?;
                model.insert(h.name, tensor)?;
            }
            Builder::Bundle {
                prefix,
                entries,
                names,
            } => {
                let Pending::Bundle(p) = pending else { unreachable!() };
                if !names.insert(p.name.clone()) {
                    return Err(TensorError::DuplicateName(p.name).into());
                }
                let entry = p
                    .finish(data, prefix.passthrough.contains(&index), prefix.precision)
                    .map_err(|e| StreamError::Bundle(e.into()))?;
                entries.push(entry);
            }
        }
        self.received += 1;
        Ok(())
    }
}

impl ObjectReceiver for ContainerReceiver {
    type Output = Payload;

    fn accept(&mut self, frame: Frame) -> Result<bool, StreamError> {
        let _hold = Reservation::new(self.meter.as_ref(), frame.payload.len() as u64);
        match std::mem::replace(&mut self.state, RecvState::Done) {
            RecvState::Done => Err(SfmError::protocol(frame.stream_id, ProtocolViolation::AfterEnd).into()),
            RecvState::Prefix => {
                let (_, frame) = self.open_stream(frame)?;
                if !frame.is_end() {
                    return Err(StreamError::Unexpected("container prefix spans frames".into()));
                }
                self.read_prefix(&frame.payload)?;
                if self.expected == 0 {
                    return Ok(true);
                }
                self.state = RecvState::Header;
                Ok(false)
            }
            RecvState::Header => {
                let (assembly, frame) = self.open_stream(frame)?;
                if frame.is_end() {
                    return Err(StreamError::Unexpected("entry header without data stream".into()));
                }
                let pending = self.read_header(&frame.payload)?;
                let cap = pending.data_len().min(64 << 20) as usize;
                self.state = RecvState::Data {
                    assembly,
                    pending,
                    buf: Vec::with_capacity(cap),
                };
                Ok(false)
            }
            RecvState::Data {
                mut assembly,
                pending,
                mut buf,
            } => {
                if frame.stream_id != assembly.stream_id() {
                    return Err(SfmError::protocol(
                        assembly.stream_id(),
                        ProtocolViolation::Interleaved(frame.stream_id),
                    )
                    .into());
                }
                let frame = assembly.accept(frame)?;
                if frame.is_meta() {
                    return Err(StreamError::Unexpected("META frame inside entry data".into()));
                }
                let expected = pending.data_len();
                let actual = buf.len() as u64 + frame.payload.len() as u64;
                if actual > expected || (frame.is_end() && actual != expected) {
                    return Err(StreamError::Unexpected(format!(
                        "entry {:?}: header declares {expected} data bytes, stream carries {}",
                        pending.name(),
                        actual
                    )));
                }
                buf.extend_from_slice(&frame.payload);
                if !frame.is_end() {
                    self.state = RecvState::Data {
                        assembly,
                        pending,
                        buf,
                    };
                    return Ok(false);
                }
                self.complete_entry(pending, buf)?;
                if self.received == self.expected {
                    return Ok(true);
                }
                self.state = RecvState::Header;
                Ok(false)
            }
        }
    }

    fn finish(self) -> Result<Payload, StreamError> {
        if self.received != self.expected || self.builder.is_none() {
            return Err(StreamError::Unexpected(format!(
                "container incomplete: {} of {} entries",
                self.received, self.expected
            )));
        }
        Ok(match self.builder.expect("checked above") {
            Builder::Model(m) => Payload::Plain(m),
            Builder::Bundle {
                prefix, entries, ..
            } => Payload::Quantized(QuantizedBundle {
                precision: prefix.precision,
                entries,
            }),
        })
    }
}
