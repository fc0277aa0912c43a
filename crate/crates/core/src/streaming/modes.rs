use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Cursor, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use crate::clock::Instant;

use super::container::{ContainerProducer, ContainerReceiver};
use super::{Itemized, MemoryMeter, Reservation, StreamError};
use crate::filter::Payload;
use crate::quant::{read_bundle, write_bundle, FTQB_MAGIC};
use crate::sfm::{
    ChunkIter, ConnRx, ConnTx, Frame, ProtocolViolation, SendReceipt, SfmError, StreamAssembly,
};
use crate::tensor::{read_model, write_model, FTNS_MAGIC};
use crate::wire::{FormatError, FormatErrorKind, WireReader};

/// A frame plus the meter charge for holding it. The charge ends when the
/// frame is handed to the driver.
#[derive(Debug)]
pub struct MeteredFrame {
    pub frame: Frame,
    pub hold: Reservation,
}

impl MeteredFrame {
    pub fn new(frame: Frame, meter: Option<&MemoryMeter>) -> Self {
        let hold = Reservation::new(meter, frame.payload.len() as u64);
        Self { frame, hold }
    }
}

/// Sender side of a transfer: yields frames in wire order.
pub trait FrameProducer: Iterator<Item = Result<MeteredFrame, StreamError>> {
    /// Entry being sent, for error reports.
    fn current_entry(&self) -> Option<&str> {
        None
    }
}

/// Receiver side of a transfer, fed one frame at a time.
pub trait ObjectReceiver {
    type Output;
    /// Consumes a frame; `true` once the object is complete.
    fn accept(&mut self, frame: Frame) -> Result<bool, StreamError>;
    fn finish(self) -> Result<Self::Output, StreamError>;
}

pub(crate) fn payload_itemized(payload: &Payload) -> Result<&dyn Itemized, StreamError> {
    match payload {
        Payload::Plain(m) => Ok(m),
        Payload::Quantized(b) => Ok(b),
        Payload::Stream(r) => Err(StreamError::Unexpected(format!(
            "cannot stream unresolved ref {}",
            r.ref_id
        ))),
    }
}

fn serialize_payload(payload: &Payload) -> Result<Vec<u8>, StreamError> {
    let obj = payload_itemized(payload)?;
    if let Some(i) = (0..obj.item_count()).find(|&i| obj.item_data(i).is_none()) {
        return Err(crate::tensor::TensorError::Unmaterialized(obj.item_name(i).to_owned()).into());
    }
    let mut out = Vec::with_capacity(super::serialized_len(obj) as usize);
    match payload {
        Payload::Plain(m) => write_model(m, &mut out),
        Payload::Quantized(b) => write_bundle(b, &mut out),
        Payload::Stream(_) => unreachable!(),
    }
    .expect("writing to a Vec cannot fail");
    Ok(out)
}

/// Decodes an FTNS or FTQB blob by its magic.
pub(crate) fn read_payload<R: Read>(r: &mut WireReader<R>, magic: &[u8]) -> Result<Payload, StreamError> {
    if magic == FTNS_MAGIC {
        Ok(Payload::Plain(read_model(r)?))
    } else if magic == FTQB_MAGIC {
        Ok(Payload::Quantized(read_bundle(r)?))
    } else {
        Err(FormatError {
            offset: 0,
            kind: FormatErrorKind::BadMagic {
                expected: *FTNS_MAGIC,
                found: magic.try_into().unwrap_or([0; 4]),
            },
        }
        .into())
    }
}

pub(crate) fn decode_payload(bytes: &[u8]) -> Result<Payload, StreamError> {
    let mut r = WireReader::from_slice(bytes);
    let payload = read_payload(&mut r, bytes.get(..4).unwrap_or_default())?;
    if r.remaining() != 0 {
        return Err(r.error(FormatErrorKind::TrailingBytes(r.remaining() as u64)).into());
    }
    Ok(payload)
}

/// Whole-object transfer: the serialized blob is held for the duration of
/// the send.
pub struct RegularProducer {
    frames: Option<ChunkIter<Cursor<Vec<u8>>>>,
    staged: Option<Reservation>,
    meter: Option<MemoryMeter>,
}

impl RegularProducer {
    pub fn new(
        blob: Vec<u8>,
        stream_id: u64,
        chunk_size: usize,
        meter: Option<&MemoryMeter>,
    ) -> Result<Self, StreamError> {
        let staged = Reservation::new(meter, blob.len() as u64);
        let len = blob.len() as u64;
        Ok(Self {
            frames: Some(ChunkIter::new(Cursor::new(blob), len, stream_id, chunk_size)?),
            staged: Some(staged),
            meter: meter.cloned(),
        })
    }

    pub fn for_payload(
        payload: &Payload,
        stream_id: u64,
        chunk_size: usize,
        meter: Option<&MemoryMeter>,
    ) -> Result<Self, StreamError> {
        Self::new(serialize_payload(payload)?, stream_id, chunk_size, meter)
    }
}

impl FrameProducer for RegularProducer {}

impl Iterator for RegularProducer {
    type Item = Result<MeteredFrame, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        // The blob is freed once the caller comes back after the last frame.
        let Some(frames) = self.frames.as_mut() else {
            self.staged = None;
            return None;
        };
        let frame = match frames.next() {
            Some(Ok(f)) => f,
            Some(Err(e)) => return Some(Err(e.into())),
            None => {
                self.frames = None;
                self.staged = None;
                return None;
            }
        };
        let out = MeteredFrame::new(frame, self.meter.as_ref());
        if out.frame.is_end() {
            self.frames = None;
        }
        Some(Ok(out))
    }
}

/// The reassembled blob of a regular transfer and its meter charge.
#[derive(Debug)]
pub struct RegularBlob {
    pub bytes: Vec<u8>,
    pub hold: Reservation,
}

/// Reassembles one stream into a single buffer.
pub struct RegularReceiver {
    chunk_size: usize,
    meter: Option<MemoryMeter>,
    assembly: Option<StreamAssembly>,
    buf: Vec<u8>,
    staged: Reservation,
}

impl RegularReceiver {
    pub fn new(chunk_size: usize, meter: Option<&MemoryMeter>) -> Self {
        Self {
            chunk_size,
            meter: meter.cloned(),
            assembly: None,
            buf: Vec::new(),
            staged: Reservation::new(meter, 0),
        }
    }
}

impl ObjectReceiver for RegularReceiver {
    type Output = RegularBlob;

    fn accept(&mut self, frame: Frame) -> Result<bool, StreamError> {
        let _hold = Reservation::new(self.meter.as_ref(), frame.payload.len() as u64);
        let chunk_size = self.chunk_size;
        let assembly = self
            .assembly
            .get_or_insert_with(|| StreamAssembly::new(frame.stream_id, chunk_size));
        if frame.stream_id != assembly.stream_id() {
            return Err(SfmError::protocol(
                assembly.stream_id(),
                ProtocolViolation::Interleaved(frame.stream_id),
            )
            .into());
        }
        let frame = assembly.accept(frame)?;
        self.staged.grow(frame.payload.len() as u64);
        self.buf.extend_from_slice(&frame.payload);
        Ok(frame.is_end())
    }

    fn finish(self) -> Result<RegularBlob, StreamError> {
        match &self.assembly {
            Some(a) if a.state() == crate::sfm::AssemblyState::Complete => Ok(RegularBlob {
                bytes: self.buf,
                hold: self.staged,
            }),
            _ => Err(StreamError::Unexpected("regular stream incomplete".into())),
        }
    }
}

/// Reads a file one chunk at a time.
pub struct FileProducer {
    path: PathBuf,
    frames: ChunkIter<File>,
    meter: Option<MemoryMeter>,
}

impl FileProducer {
    pub fn open(
        path: &Path,
        stream_id: u64,
        chunk_size: usize,
        meter: Option<&MemoryMeter>,
    ) -> Result<Self, StreamError> {
        let file = File::open(path).map_err(|e| StreamError::io(path, 0, e))?;
        let len = file.metadata().map_err(|e| StreamError::io(path, 0, e))?.len();
        Ok(Self {
            path: path.to_owned(),
            frames: ChunkIter::new(file, len, stream_id, chunk_size)?,
            meter: meter.cloned(),
        })
    }
}

impl FrameProducer for FileProducer {}

impl Iterator for FileProducer {
    type Item = Result<MeteredFrame, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(match self.frames.next()? {
            Ok(frame) => Ok(MeteredFrame::new(frame, self.meter.as_ref())),
            Err(SfmError::Source { offset, reason, .. }) => Err(StreamError::Io {
                path: self.path.clone(),
                offset,
                reason,
            }),
            Err(e) => Err(e.into()),
        })
    }
}

static TEMP_SEQ: AtomicU64 = AtomicU64::new(0);

fn temp_sibling(dest: &Path) -> PathBuf {
    let name = dest
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stream".into());
    let n = TEMP_SEQ.fetch_add(1, Ordering::Relaxed);
    dest.with_file_name(format!(".{name}.{}.{n}.partial", std::process::id()))
}

/// Writes a file stream to a temporary sibling of `dest` and renames it
/// into place once the END frame has been written.
pub struct FileReceiver {
    dest: PathBuf,
    temp: PathBuf,
    file: Option<File>,
    chunk_size: usize,
    meter: Option<MemoryMeter>,
    assembly: Option<StreamAssembly>,
    written: u64,
    done: bool,
}

impl FileReceiver {
    pub fn create(dest: &Path, chunk_size: usize, meter: Option<&MemoryMeter>) -> Result<Self, StreamError> {
        let temp = temp_sibling(dest);
        let file = File::create(&temp).map_err(|e| StreamError::io(&temp, 0, e))?;
        Ok(Self {
            dest: dest.to_owned(),
            temp,
            file: Some(file),
            chunk_size,
            meter: meter.cloned(),
            assembly: None,
            written: 0,
            done: false,
        })
    }
}

impl ObjectReceiver for FileReceiver {
    type Output = (PathBuf, u64);

    fn accept(&mut self, frame: Frame) -> Result<bool, StreamError> {
        let _hold = Reservation::new(self.meter.as_ref(), frame.payload.len() as u64);
        let chunk_size = self.chunk_size;
        let assembly = self
            .assembly
            .get_or_insert_with(|| StreamAssembly::new(frame.stream_id, chunk_size));
        if frame.stream_id != assembly.stream_id() {
            return Err(SfmError::protocol(
                assembly.stream_id(),
                ProtocolViolation::Interleaved(frame.stream_id),
            )
            .into());
        }
        let frame = assembly.accept(frame)?;
        let file = self
            .file
            .as_mut()
            .ok_or_else(|| StreamError::Unexpected("file already closed".into()))?;
        file.write_all(&frame.payload)
            .map_err(|e| StreamError::io(&self.temp, self.written, e))?;
        self.written += frame.payload.len() as u64;
        if frame.is_end() {
            let file = self.file.take().expect("open until END");
            file.sync_data()
                .map_err(|e| StreamError::io(&self.temp, self.written, e))?;
            drop(file);
            fs::rename(&self.temp, &self.dest)
                .map_err(|e| StreamError::io(&self.dest, self.written, e))?;
            self.done = true;
        }
        Ok(self.done)
    }

    fn finish(mut self) -> Result<(PathBuf, u64), StreamError> {
        if !self.done {
            return Err(StreamError::Unexpected("file stream incomplete".into()));
        }
        Ok((std::mem::take(&mut self.dest), self.written))
    }
}

impl Drop for FileReceiver {
    fn drop(&mut self) {
        if !self.done {
            self.file = None;
            let _ = fs::remove_file(&self.temp);
        }
    }
}

/// Sends every frame `producer` yields, releasing each frame's charge once
/// the driver has it.
pub fn pump<P: FrameProducer>(tx: &ConnTx, mut producer: P) -> Result<SendReceipt, StreamError> {
    let started = Instant::now();
    let mut receipt: Option<SendReceipt> = None;
    while let Some(item) = producer.next() {
        let MeteredFrame { frame, hold } = item.map_err(|e| match e {
            StreamError::Transport { entry: None, source } => StreamError::Transport {
                entry: producer.current_entry().map(str::to_owned),
                source,
            },
            other => other,
        })?;
        receipt
            .get_or_insert_with(|| SendReceipt::new(frame.stream_id))
            .record(&frame);
        if let Err(source) = tx.send_frame(frame) {
            return Err(StreamError::Transport {
                entry: producer.current_entry().map(str::to_owned),
                source,
            });
        }
        drop(hold);
    }
    let mut receipt = receipt.unwrap_or_else(|| SendReceipt::new(0));
    receipt.elapsed = started.elapsed();
    Ok(receipt)
}

/// Feeds frames from `rx` (after an optional already-received `first`)
/// into `receiver` until it completes.
pub(crate) fn drain<O: ObjectReceiver>(
    rx: &mut ConnRx,
    mut receiver: O,
    first: Option<Frame>,
) -> Result<O::Output, StreamError> {
    let mut next = first;
    loop {
        let frame = match next.take() {
            Some(f) => f,
            None => rx.recv_frame()?,
        };
        if receiver.accept(frame)? {
            return receiver.finish();
        }
    }
}

/// Runs a transfer in one thread: each frame is handed from producer to
/// receiver as soon as it is produced.
pub fn lockstep<P: FrameProducer, O: ObjectReceiver>(
    mut producer: P,
    mut receiver: O,
) -> Result<(SendReceipt, O::Output), StreamError> {
    let started = Instant::now();
    let mut receipt: Option<SendReceipt> = None;
    let mut complete = false;
    for item in producer.by_ref() {
        let MeteredFrame { frame, hold } = item?;
        receipt
            .get_or_insert_with(|| SendReceipt::new(frame.stream_id))
            .record(&frame);
        drop(hold);
        if complete {
            return Err(StreamError::Unexpected("frames after object completed".into()));
        }
        complete = receiver.accept(frame)?;
    }
    let mut receipt = receipt.unwrap_or_else(|| SendReceipt::new(0));
    receipt.elapsed = started.elapsed();
    Ok((receipt, receiver.finish()?))
}

/// Serializes the whole payload, then chunks it.
pub fn send_regular(
    payload: &Payload,
    tx: &ConnTx,
    meter: Option<&MemoryMeter>,
) -> Result<SendReceipt, StreamError> {
    let producer = RegularProducer::for_payload(payload, tx.next_stream_id(), tx.config().chunk_size, meter)?;
    pump(tx, producer)
}

/// Sends the payload one entry at a time.
pub fn stream_container(
    payload: &Payload,
    tx: &ConnTx,
    meter: Option<&MemoryMeter>,
) -> Result<SendReceipt, StreamError> {
    let obj = payload_itemized(payload)?;
    let producer = ContainerProducer::new(obj, || tx.next_stream_id(), tx.config().chunk_size, meter);
    pump(tx, producer)
}

/// Sends a file one chunk at a time.
pub fn stream_file(
    path: &Path,
    tx: &ConnTx,
    meter: Option<&MemoryMeter>,
) -> Result<SendReceipt, StreamError> {
    let producer = FileProducer::open(path, tx.next_stream_id(), tx.config().chunk_size, meter)?;
    pump(tx, producer)
}

pub fn receive_regular(rx: &mut ConnRx, meter: Option<&MemoryMeter>) -> Result<Payload, StreamError> {
    let blob = drain(rx, RegularReceiver::new(rx.config().chunk_size, meter), None)?;
    decode_payload(&blob.bytes)
}

pub fn receive_container(rx: &mut ConnRx, meter: Option<&MemoryMeter>) -> Result<Payload, StreamError> {
    drain(rx, ContainerReceiver::new(rx.config().chunk_size, meter), None)
}

/// Receives a file stream into `dest`; returns its length.
pub fn receive_file(rx: &mut ConnRx, dest: &Path, meter: Option<&MemoryMeter>) -> Result<u64, StreamError> {
    let receiver = FileReceiver::create(dest, rx.config().chunk_size, meter)?;
    Ok(drain(rx, receiver, None)?.1)
}

/// Writes the payload's regular serialization to `path` entry by entry.
pub fn spool_payload(payload: &Payload, path: &Path) -> Result<u64, StreamError> {
    let file = File::create(path).map_err(|e| StreamError::io(path, 0, e))?;
    let mut w = BufWriter::new(file);
    match payload {
        Payload::Plain(m) => write_model(m, &mut w),
        Payload::Quantized(b) => write_bundle(b, &mut w),
        Payload::Stream(r) => {
            return Err(StreamError::Unexpected(format!("cannot spool ref {}", r.ref_id)))
        }
    }
    .and_then(|()| w.flush())
    .map_err(|e| StreamError::io(path, 0, e))?;
    Ok(super::serialized_len(payload_itemized(payload)?))
}

/// Reads back a file written by [`spool_payload`].
pub(crate) fn load_spooled(path: &Path) -> Result<Payload, StreamError> {
    let file = File::open(path).map_err(|e| StreamError::io(path, 0, e))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|e| StreamError::io(path, 0, e))?;
    let magic: [u8; 4] = head.get(..4).and_then(|m| m.try_into().ok()).unwrap_or_default();
    let mut r = WireReader::new(reader);
    let payload = read_payload(&mut r, &magic)?;
    let mut rest = [0u8; 1];
    if r.into_inner().read(&mut rest).map_err(|e| StreamError::io(path, 0, e))? != 0 {
        return Err(StreamError::Unexpected(format!("{} has trailing bytes", path.display())));
    }
    Ok(payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::{memory_pair, TransportConfig, MIN_CHUNK};
    use crate::tensor::{build_synthetic_model, serialize_model, ModelSpec, ParameterMap, Tensor};
    use std::thread;

    fn small_model() -> ParameterMap {
        let spec = ModelSpec::llama_3_2_1b().scaled(1 << 12);
        build_synthetic_model(&spec, 3, true).unwrap()
    }

    fn ids() -> impl FnMut() -> u64 {
        let mut n = 0;
        move || {
            n += 1;
            n
        }
    }

    #[test]
    fn lockstep_modes_preserve_payload() {
        let model = small_model();
        let payload = Payload::Plain(model.clone());
        let c = MIN_CHUNK;

        let (_, blob) = lockstep(
            RegularProducer::for_payload(&payload, 1, c, None).unwrap(),
            RegularReceiver::new(c, None),
        )
        .unwrap();
        assert_eq!(blob.bytes, serialize_model(&model).unwrap());

        let (_, got) = lockstep(
            ContainerProducer::new(&model, ids(), c, None),
            ContainerReceiver::new(c, None),
        )
        .unwrap();
        assert_eq!(got, payload);

        for p in crate::quant::Precision::ALL {
            let b = crate::quant::quantize_message(&model, p).unwrap();
            let (_, got) = lockstep(
                ContainerProducer::new(&b, ids(), c, None),
                ContainerReceiver::new(c, None),
            )
            .unwrap();
            assert_eq!(got, Payload::Quantized(b), "{p}");
        }
    }

    #[test]
    fn container_handles_empty_and_zero_length_entries() {
        let empty = ParameterMap::new();
        let (receipt, got) = lockstep(
            ContainerProducer::new(&empty, ids(), MIN_CHUNK, None),
            ContainerReceiver::new(MIN_CHUNK, None),
        )
        .unwrap();
        assert_eq!(receipt.frames, 1);
        assert_eq!(got, Payload::Plain(empty));

        let mut m = ParameterMap::new();
        m.insert("none", Tensor::from_f32(vec![0], &[])).unwrap();
        m.insert("one", Tensor::from_f32(vec![1], &[2.0])).unwrap();
        let (receipt, got) = lockstep(
            ContainerProducer::new(&m, ids(), MIN_CHUNK, None),
            ContainerReceiver::new(MIN_CHUNK, None),
        )
        .unwrap();
        assert_eq!(receipt.frames, 5);
        assert_eq!(got, Payload::Plain(m));
    }

    #[test]
    fn container_peak_is_one_entry() {
        let model = small_model();
        let meter = MemoryMeter::new();
        let c = MIN_CHUNK as u64;
        lockstep(
            ContainerProducer::new(&model, ids(), MIN_CHUNK, Some(&meter)),
            ContainerReceiver::new(MIN_CHUNK, Some(&meter)),
        )
        .unwrap();
        let max_item = (0..model.item_count())
            .map(|i| model.item_header(i).len() as u64 + model.item_data_len(i))
            .max()
            .unwrap();
        assert_eq!(meter.current(), 0);
        assert!(meter.peak() <= max_item + c, "{} vs {}", meter.peak(), max_item);
        assert!(meter.peak() >= max_item);

        let reg = MemoryMeter::new();
        lockstep(
            RegularProducer::for_payload(&Payload::Plain(model.clone()), 1, MIN_CHUNK, Some(&reg))
                .unwrap(),
            RegularReceiver::new(MIN_CHUNK, Some(&reg)),
        )
        .map(|(_, blob)| drop(blob))
        .unwrap();
        assert_eq!(reg.current(), 0);
        assert!(reg.peak() >= 2 * super::super::serialized_len(&model));
    }

    #[test]
    fn single_entry_container_matches_regular_peak() {
        let mut m = ParameterMap::new();
        let values: Vec<f32> = (0..10_000).map(|i| i as f32).collect();
        m.insert("w", Tensor::from_f32(vec![10_000], &values)).unwrap();
        let c = MIN_CHUNK;
        let reg = MemoryMeter::new();
        let (_, blob) = lockstep(
            RegularProducer::for_payload(&Payload::Plain(m.clone()), 1, c, Some(&reg)).unwrap(),
            RegularReceiver::new(c, None),
        )
        .unwrap();
        drop(blob);
        let con = MemoryMeter::new();
        lockstep(ContainerProducer::new(&m, ids(), c, Some(&con)), ContainerReceiver::new(c, None))
            .unwrap();
        // sender-side peaks differ only by the container prefix
        let prefix = m.prefix().len() as u64;
        assert_eq!(reg.peak(), con.peak() + prefix);
    }

    #[test]
    fn threaded_transfers_over_memory_driver() {
        let model = small_model();
        let cfg = TransportConfig::default().with_chunk_size(MIN_CHUNK);
        for mode in 0..2 {
            let (a, b) = memory_pair(&cfg);
            let payload = Payload::Plain(model.clone());
            let sent = payload.clone();
            let h = thread::spawn(move || {
                if mode == 0 {
                    send_regular(&sent, &a.tx, None)
                } else {
                    stream_container(&sent, &a.tx, None)
                }
                .unwrap()
            });
            let mut rx = b.rx;
            let got = if mode == 0 {
                receive_regular(&mut rx, None)
            } else {
                receive_container(&mut rx, None)
            }
            .unwrap();
            let receipt = h.join().unwrap();
            assert_eq!(got, payload);
            assert_eq!(rx.bytes_received(), receipt.wire_bytes);
        }
    }

    #[test]
    fn file_round_trip_and_atomic_destination() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src.bin");
        let data: Vec<u8> = (0..100_000u32).map(|i| (i * 31 % 256) as u8).collect();
        fs::write(&src, &data).unwrap();
        let dest = dir.path().join("dest.bin");
        let meter = MemoryMeter::new();
        let (receipt, (path, len)) = lockstep(
            FileProducer::open(&src, 1, MIN_CHUNK, Some(&meter)).unwrap(),
            FileReceiver::create(&dest, MIN_CHUNK, Some(&meter)).unwrap(),
        )
        .unwrap();
        assert_eq!(path, dest);
        assert_eq!(len, data.len() as u64);
        assert_eq!(receipt.frames, 25);
        assert_eq!(fs::read(&dest).unwrap(), data);
        assert!(meter.peak() <= 2 * MIN_CHUNK as u64);

        let empty = dir.path().join("empty");
        fs::write(&empty, b"").unwrap();
        let out = dir.path().join("empty.out");
        let (receipt, _) = lockstep(
            FileProducer::open(&empty, 1, MIN_CHUNK, None).unwrap(),
            FileReceiver::create(&out, MIN_CHUNK, None).unwrap(),
        )
        .unwrap();
        assert_eq!(receipt.frames, 1);
        assert_eq!(fs::read(&out).unwrap(), b"");

        // an interrupted transfer leaves no destination and no temp file
        let partial = dir.path().join("partial.out");
        let mut recv = FileReceiver::create(&partial, MIN_CHUNK, None).unwrap();
        let mut producer = FileProducer::open(&src, 1, MIN_CHUNK, None).unwrap();
        recv.accept(producer.next().unwrap().unwrap().frame).unwrap();
        drop(recv);
        assert!(!partial.exists());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 4);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = FileProducer::open(Path::new("/nonexistent/x"), 1, MIN_CHUNK, None).err().unwrap();
        assert!(matches!(err, StreamError::Io { offset: 0, .. }));
    }

    #[test]
    fn spool_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model();
        for payload in [
            Payload::Plain(model.clone()),
            Payload::Quantized(
                crate::quant::quantize_message(&model, crate::quant::Precision::Float4).unwrap(),
            ),
        ] {
            let path = dir.path().join("spool");
            let len = spool_payload(&payload, &path).unwrap();
            assert_eq!(fs::metadata(&path).unwrap().len(), len);
            assert_eq!(load_spooled(&path).unwrap(), payload);
        }
    }

    #[test]
    fn unmaterialized_entry_is_named() {
        let spec = ModelSpec::llama_3_2_1b().scaled(1 << 12);
        let lazy = build_synthetic_model(&spec, 0, false).unwrap();
        let err = lockstep(
            ContainerProducer::new(&lazy, ids(), MIN_CHUNK, None),
            ContainerReceiver::new(MIN_CHUNK, None),
        )
        .unwrap_err();
        assert!(err.to_string().contains("model.embed_tokens.weight"), "{err}");
        assert!(send_regular(&Payload::Plain(lazy), &memory_pair(&TransportConfig::default()).0.tx, None).is_err());
    }
}
