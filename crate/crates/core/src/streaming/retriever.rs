use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use super::container::{ContainerProducer, ContainerReceiver};
use super::modes::{
    decode_payload, drain, load_spooled, payload_itemized, pump, spool_payload, FileProducer,
    FileReceiver, RegularProducer, RegularReceiver,
};
use super::{serialized_len, MemoryMeter, RefError, StreamError, StreamMode, StreamRef};
use crate::filter::{decode_message, encode_message, Message, Payload};
use crate::sfm::{flags, ConnRx, ConnTx, Connection, Frame};

const PULL: &[u8; 4] = b"PULL";
const RERR: &[u8; 4] = b"RERR";
const REASON_UNKNOWN: u8 = 0;
const REASON_CONSUMED: u8 = 1;

static SPOOL_SEQ: AtomicU64 = AtomicU64::new(0);

/// Counters for one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PeerStats {
    /// Wire bytes, frame headers included.
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub send_peak: u64,
    pub recv_peak: u64,
}

/// One end of a message link.
///
/// In regular mode a message travels inline as one serialized envelope. In
/// container and file mode the envelope carries a [`StreamRef`] instead of
/// its payload, and the recipient pulls the object when it is ready: it
/// sends a pull request and the sender streams the object back in the
/// referenced mode. A reference can be pulled once.
///
/// Sending and receiving charge separate meters so each direction's peak is
/// deterministic.
pub struct Peer {
    tx: ConnTx,
    rx: ConnRx,
    mode: StreamMode,
    spool_dir: PathBuf,
    send_meter: MemoryMeter,
    recv_meter: MemoryMeter,
    next_ref: u64,
    consumed: HashSet<u64>,
}

fn control(kind: &[u8; 4], body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(kind);
    out.extend_from_slice(body);
    out
}

/// Control messages are single META frames whose payload starts with one of
/// the control tags.
fn as_control(frame: &Frame) -> Option<(&[u8], &[u8])> {
    if !(frame.is_meta() && frame.is_begin() && frame.is_end()) {
        return None;
    }
    let tag = frame.payload.get(..4)?;
    (tag == PULL || tag == RERR).then(|| (tag, &frame.payload[4..]))
}

fn ref_id_of(body: &[u8]) -> Result<u64, StreamError> {
    body.get(..8)
        .and_then(|b| b.try_into().ok())
        .map(u64::from_le_bytes)
        .ok_or_else(|| StreamError::Unexpected("short control message".into()))
}

impl Peer {
    pub fn new(conn: Connection, mode: StreamMode) -> Self {
        let (tx, rx) = conn.split();
        Self {
            tx,
            rx,
            mode,
            spool_dir: std::env::temp_dir(),
            send_meter: MemoryMeter::new(),
            recv_meter: MemoryMeter::new(),
            next_ref: 1,
            consumed: HashSet::new(),
        }
    }

    /// Directory for the temporary files of file-mode transfers.
    pub fn with_spool_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.spool_dir = dir.into();
        self
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    pub fn send_meter(&self) -> &MemoryMeter {
        &self.send_meter
    }

    pub fn recv_meter(&self) -> &MemoryMeter {
        &self.recv_meter
    }

    pub fn stats(&self) -> PeerStats {
        PeerStats {
            bytes_sent: self.tx.bytes_sent(),
            bytes_received: self.rx.bytes_received(),
            send_peak: self.send_meter.peak(),
            recv_peak: self.recv_meter.peak(),
        }
    }

    /// Restarts both meters' high-water marks.
    pub fn reset_peaks(&self) {
        self.send_meter.reset_peak();
        self.recv_meter.reset_peak();
    }

    pub fn close(&self) {
        self.tx.close();
    }

    fn chunk_size(&self) -> usize {
        self.tx.config().chunk_size
    }

    fn send_control(&self, kind: &[u8; 4], body: &[u8]) -> Result<(), StreamError> {
        let id = self.tx.next_stream_id();
        let frame = Frame::new(id, 0, flags::BEGIN | flags::END | flags::META, control(kind, body));
        self.tx.send_frame(frame)?;
        Ok(())
    }

    fn refuse(&self, ref_id: u64) -> Result<(), StreamError> {
        let reason = if self.consumed.contains(&ref_id) {
            REASON_CONSUMED
        } else {
            REASON_UNKNOWN
        };
        let mut body = ref_id.to_le_bytes().to_vec();
        body.push(reason);
        log::debug!("refusing pull of ref {ref_id} (reason {reason})");
        self.send_control(RERR, &body)
    }

    fn send_envelope(&self, msg: &Message) -> Result<(), StreamError> {
        let blob = encode_message(msg)?;
        let producer = RegularProducer::new(
            blob,
            self.tx.next_stream_id(),
            self.chunk_size(),
            Some(&self.send_meter),
        )?;
        pump(&self.tx, producer)?;
        Ok(())
    }

    /// Sends `msg`. Outside regular mode this returns after the recipient
    /// has pulled the payload.
    pub fn send_message(&mut self, msg: &Message) -> Result<(), StreamError> {
        if self.mode == StreamMode::Regular || matches!(msg.payload, Payload::Stream(_)) {
            return self.send_envelope(msg);
        }
        let obj = payload_itemized(&msg.payload)?;
        let r = StreamRef {
            ref_id: self.next_ref,
            mode: self.mode,
            total_bytes: serialized_len(obj),
            entry_count: obj.item_count() as u32,
        };
        self.next_ref += 1;
        let envelope = Message {
            kind: msg.kind,
            headers: msg.headers.clone(),
            payload: Payload::Stream(r),
        };
        self.send_envelope(&envelope)?;
        self.serve_pull(r, &msg.payload)
    }

    fn serve_pull(&mut self, r: StreamRef, payload: &Payload) -> Result<(), StreamError> {
        loop {
            let frame = self.rx.recv_frame()?;
            let Some((tag, body)) = as_control(&frame) else {
                return Err(StreamError::Unexpected(format!(
                    "expected a pull for ref {}, got stream {}",
                    r.ref_id, frame.stream_id
                )));
            };
            let id = ref_id_of(body)?;
            if tag != PULL {
                return Err(StreamError::Unexpected(format!("peer refused ref {id}")));
            }
            if id != r.ref_id {
                self.refuse(id)?;
                continue;
            }
            self.consumed.insert(id);
            return self.serve(r, payload);
        }
    }

    fn serve(&self, r: StreamRef, payload: &Payload) -> Result<(), StreamError> {
        let meter = Some(&self.send_meter);
        let chunk = self.chunk_size();
        match r.mode {
            StreamMode::Regular => {
                let producer =
                    RegularProducer::for_payload(payload, self.tx.next_stream_id(), chunk, meter)?;
                pump(&self.tx, producer)?;
            }
            StreamMode::Container => {
                let obj = payload_itemized(payload)?;
                let producer = ContainerProducer::new(obj, || self.tx.next_stream_id(), chunk, meter);
                pump(&self.tx, producer)?;
            }
            StreamMode::File => {
                let path = self.spool_path("out");
                let result = spool_payload(payload, &path).and_then(|_| {
                    let producer = FileProducer::open(&path, self.tx.next_stream_id(), chunk, meter)?;
                    pump(&self.tx, producer)
                });
                let _ = fs::remove_file(&path);
                result?;
            }
        }
        Ok(())
    }

    fn spool_path(&self, tag: &str) -> PathBuf {
        let n = SPOOL_SEQ.fetch_add(1, Ordering::Relaxed);
        self.spool_dir
            .join(format!("fedstream-{}-{n}.{tag}", std::process::id()))
    }

    /// Receives the next message, pulling its payload if it arrived as a
    /// reference. Stray pull requests are refused along the way.
    pub fn recv_message(&mut self) -> Result<Message, StreamError> {
        let first = loop {
            let frame = self.rx.recv_frame()?;
            match as_control(&frame) {
                Some((tag, body)) if tag == PULL => {
                    let id = ref_id_of(body)?;
                    self.refuse(id)?;
                }
                Some(_) => return Err(StreamError::Unexpected("unsolicited refusal".into())),
                None => break frame,
            }
        };
        let receiver = RegularReceiver::new(self.chunk_size(), Some(&self.recv_meter));
        let blob = drain(&mut self.rx, receiver, Some(first))?;
        let mut msg = decode_message(&blob.bytes)?;
        drop(blob);
        if let Payload::Stream(r) = msg.payload {
            let payload = self.retrieve(&r)?;
            msg.replace_payload(payload);
        }
        Ok(msg)
    }

    /// Pulls the object behind `r` from the peer that advertised it.
    pub fn retrieve(&mut self, r: &StreamRef) -> Result<Payload, StreamError> {
        self.send_control(PULL, &r.ref_id.to_le_bytes())?;
        let first = self.rx.recv_frame()?;
        if let Some((tag, body)) = as_control(&first) {
            let id = ref_id_of(body)?;
            if tag == RERR && id == r.ref_id {
                return Err(match body.get(8) {
                    Some(&REASON_CONSUMED) => RefError::Consumed(id),
                    _ => RefError::Unknown(id),
                }
                .into());
            }
            return Err(StreamError::Unexpected("unexpected control message".into()));
        }
        let meter = Some(&self.recv_meter);
        let chunk = self.chunk_size();
        let (payload, received) = match r.mode {
            StreamMode::Regular => {
                let blob = drain(&mut self.rx, RegularReceiver::new(chunk, meter), Some(first))?;
                let len = blob.bytes.len() as u64;
                (decode_payload(&blob.bytes)?, len)
            }
            StreamMode::Container => {
                let p = drain(&mut self.rx, ContainerReceiver::new(chunk, meter), Some(first))?;
                let len = serialized_len(payload_itemized(&p)?);
                (p, len)
            }
            StreamMode::File => {
                let path = self.spool_path("in");
                let receiver = FileReceiver::create(&path, chunk, meter)?;
                let result = drain(&mut self.rx, receiver, Some(first))
                    .and_then(|(_, len)| Ok((load_spooled(&path)?, len)));
                let _ = fs::remove_file(&path);
                result?
            }
        };
        if received != r.total_bytes {
            return Err(StreamError::Unexpected(format!(
                "ref {} advertised {} bytes, received {received}",
                r.ref_id, r.total_bytes
            )));
        }
        Ok(payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{
        apply_chain, standard_two_way_config, FilterPoint, MessageKind, HDR_PRECISION, HDR_STATE,
        STATE_QUANTIZED,
    };
    use crate::quant::Precision;
    use crate::sfm::{memory_pair, TransportConfig, MIN_CHUNK};
    use crate::tensor::{build_synthetic_model, ModelSpec, ParameterMap};
    use std::thread;

    fn model() -> ParameterMap {
        build_synthetic_model(&ModelSpec::llama_3_2_1b().scaled(1 << 12), 11, true).unwrap()
    }

    fn pair(mode: StreamMode) -> (Peer, Peer) {
        let cfg = TransportConfig::default().with_chunk_size(MIN_CHUNK);
        let (a, b) = memory_pair(&cfg);
        (Peer::new(a, mode), Peer::new(b, mode))
    }

    #[test]
    fn every_mode_delivers_the_message() {
        let msg = Message::new(MessageKind::TaskData, Payload::Plain(model())).with_header("k", "v");
        for mode in StreamMode::ALL {
            let (mut server, mut client) = pair(mode);
            let sent = msg.clone();
            let h = thread::spawn(move || {
                server.send_message(&sent).unwrap();
                server
            });
            let got = client.recv_message().unwrap();
            let server = h.join().unwrap();
            assert_eq!(got, msg, "{mode}");
            assert_eq!(server.stats().bytes_sent, client.stats().bytes_received);
        }
    }

    #[test]
    fn advertised_envelope_is_small_and_ref_is_one_shot() {
        let m = model();
        let (mut server, mut client) = pair(StreamMode::Container);
        let msg = Message::new(MessageKind::TaskData, Payload::Plain(m.clone()));
        let h = thread::spawn(move || {
            server.send_message(&msg).unwrap();
            // answers the second pull with a refusal, then takes the reply
            let reply = server.recv_message().unwrap();
            assert_eq!(reply.kind, MessageKind::TaskResult);
        });
        // read the envelope by hand to look at the reference
        let first = client.rx.recv_frame().unwrap();
        let blob = drain(
            &mut client.rx,
            RegularReceiver::new(MIN_CHUNK, None),
            Some(first),
        )
        .unwrap();
        assert!(blob.bytes.len() < 1024);
        let env = decode_message(&blob.bytes).unwrap();
        let Payload::Stream(r) = env.payload else { panic!("expected a ref") };
        assert_eq!(r.entry_count as usize, m.len());
        assert_eq!(client.retrieve(&r).unwrap(), Payload::Plain(m));
        let err = client.retrieve(&r).unwrap_err();
        assert!(matches!(err, StreamError::Ref(RefError::Consumed(id)) if id == r.ref_id));
        let unknown = StreamRef { ref_id: 999, ..r };
        assert!(matches!(
            client.retrieve(&unknown).unwrap_err(),
            StreamError::Ref(RefError::Unknown(999))
        ));
        client
            .send_message(&Message::new(MessageKind::TaskResult, Payload::Plain(ParameterMap::new())))
            .unwrap();
        h.join().unwrap();
    }

    #[test]
    fn pulled_bundle_composes_with_filters() {
        let chain = standard_two_way_config(Precision::NormFloat4);
        let plain = Message::new(MessageKind::TaskData, Payload::Plain(model()));
        let out = apply_chain(plain, FilterPoint::TaskDataOutServer, &chain).unwrap();
        let baseline = apply_chain(out.clone(), FilterPoint::TaskDataInClient, &chain).unwrap();
        for mode in [StreamMode::Container, StreamMode::File] {
            let (mut server, mut client) = pair(mode);
            let sent = out.clone();
            let h = thread::spawn(move || server.send_message(&sent).unwrap());
            let got = client.recv_message().unwrap();
            h.join().unwrap();
            assert!(matches!(got.payload, Payload::Quantized(_)));
            assert_eq!(got.header(HDR_STATE), Some(STATE_QUANTIZED));
            assert_eq!(got.header(HDR_PRECISION), Some("normfloat4"));
            let delivered = apply_chain(got, FilterPoint::TaskDataInClient, &chain).unwrap();
            assert_eq!(delivered, baseline, "{mode}");
        }
    }
}
