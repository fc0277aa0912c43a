//! Task envelopes and their FTMS wire encoding.
//!
//! ```text
//! "FTMS" | version u16 | kind u8 | header_count u16 |
//! header_count x (key: u16 len + bytes, value: u16 len + bytes) |
//! payload tag u8 (0 plain FTNS, 1 quantized FTQB, 2 stream ref) | payload_len u64 | payload
//! ```

use std::collections::BTreeMap;
use std::fmt;

use crate::quant::{deserialize_bundle, write_bundle, BundleDecodeError, QuantizedBundle};
use crate::streaming::StreamRef;
use crate::tensor::{deserialize_model, write_model, ParameterMap, TensorError};
use crate::wire::{put_u16, put_u64, FormatError, FormatErrorKind, WireReader};

pub const HDR_JOB_ID: &str = "job_id";
pub const HDR_ROUND: &str = "round";
pub const HDR_SOURCE: &str = "source";
pub const HDR_STATE: &str = "payload_state";
pub const HDR_PRECISION: &str = "precision";

pub const STATE_PLAIN: &str = "plain";
pub const STATE_QUANTIZED: &str = "quantized";

pub const FTMS_MAGIC: &[u8; 4] = b"FTMS";
pub const FTMS_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    TaskData,
    TaskResult,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::TaskData => "TaskData",
            MessageKind::TaskResult => "TaskResult",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Plain(ParameterMap),
    Quantized(QuantizedBundle),
    /// Placeholder for an object the recipient pulls separately.
    Stream(StreamRef),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::Plain(_) => 0,
            Payload::Quantized(_) => 1,
            Payload::Stream(_) => 2,
        }
    }

    /// Length of the payload's FTNS / FTQB / ref encoding.
    pub fn serialized_len(&self) -> u64 {
        match self {
            Payload::Plain(m) => crate::streaming::serialized_len(m),
            Payload::Quantized(b) => crate::streaming::serialized_len(b),
            Payload::Stream(_) => crate::streaming::STREAM_REF_LEN as u64,
        }
    }

    /// State flag implied by the variant; stream refs have none of their own.
    pub fn state(&self) -> Option<&'static str> {
        match self {
            Payload::Plain(_) => Some(STATE_PLAIN),
            Payload::Quantized(_) => Some(STATE_QUANTIZED),
            Payload::Stream(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub headers: BTreeMap<String, String>,
    pub payload: Payload,
}

impl Message {
    pub fn new(kind: MessageKind, payload: Payload) -> Self {
        let mut msg = Self {
            kind,
            headers: BTreeMap::new(),
            payload,
        };
        if let Some(state) = msg.payload.state() {
            msg.set_header(HDR_STATE, state);
        }
        msg
    }

    pub fn with_header(mut self, key: &str, value: impl Into<String>) -> Self {
        self.set_header(key, value);
        self
    }

    pub fn set_header(&mut self, key: &str, value: impl Into<String>) {
        self.headers.insert(key.to_owned(), value.into());
    }

    pub fn header(&self, key: &str) -> Option<&str> {
        self.headers.get(key).map(String::as_str)
    }

    /// Replaces the payload, keeping the state flag in sync with it.
    pub fn replace_payload(&mut self, payload: Payload) -> Payload {
        if let Some(state) = payload.state() {
            self.set_header(HDR_STATE, state);
        }
        std::mem::replace(&mut self.payload, payload)
    }

    /// True when the state header agrees with the payload variant.
    pub fn state_is_consistent(&self) -> bool {
        match self.payload.state() {
            Some(state) => self.header(HDR_STATE) == Some(state),
            None => matches!(self.header(HDR_STATE), Some(STATE_PLAIN | STATE_QUANTIZED)),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MessageDecodeError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Bundle(#[from] BundleDecodeError),
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u16(out, u16::try_from(s.len()).expect("header strings fit in u16"));
    out.extend_from_slice(s.as_bytes());
}

fn read_str(r: &mut WireReader<&[u8]>) -> Result<String, FormatError> {
    let len = r.u16()?;
    let at = r.position();
    let raw = r.bytes(u64::from(len))?;
    String::from_utf8(raw).map_err(|_| FormatError {
        offset: at,
        kind: FormatErrorKind::InvalidUtf8,
    })
}

/// Serialized FTMS envelope. The payload is written in place, so the only
/// full-size buffer is the returned one.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, TensorError> {
    if let Payload::Plain(m) = &msg.payload {
        if let Some((name, _)) = m.iter().find(|(_, t)| !t.is_materialized()) {
            return Err(TensorError::Unmaterialized(name.to_owned()));
        }
    }
    let mut out = Vec::with_capacity(64 + msg.payload.serialized_len() as usize);
    out.extend_from_slice(FTMS_MAGIC);
    put_u16(&mut out, FTMS_VERSION);
    out.push(match msg.kind {
        MessageKind::TaskData => 0,
        MessageKind::TaskResult => 1,
    });
    put_u16(&mut out, msg.headers.len() as u16);
    for (k, v) in &msg.headers {
        put_str(&mut out, k);
        put_str(&mut out, v);
    }
    out.push(msg.payload.tag());
    let len_at = out.len();
    put_u64(&mut out, 0);
    match &msg.payload {
        Payload::Plain(m) => write_model(m, &mut out).expect("writing to a Vec cannot fail"),
        Payload::Quantized(b) => write_bundle(b, &mut out).expect("writing to a Vec cannot fail"),
        Payload::Stream(r) => out.extend_from_slice(&r.to_bytes()),
    }
    let len = (out.len() - len_at - 8) as u64;
    out[len_at..len_at + 8].copy_from_slice(&len.to_le_bytes());
    Ok(out)
}

pub fn decode_message(bytes: &[u8]) -> Result<Message, MessageDecodeError> {
    let mut r = WireReader::from_slice(bytes);
    r.magic(FTMS_MAGIC)?;
    let version = r.u16()?;
    if version != FTMS_VERSION {
        return Err(r.error(FormatErrorKind::UnsupportedVersion(version)).into());
    }
    let kind = match r.u8()? {
        0 => MessageKind::TaskData,
        1 => MessageKind::TaskResult,
        value => {
            return Err(r
                .error(FormatErrorKind::InvalidTag {
                    field: "message kind",
                    value,
                })
                .into())
        }
    };
    let count = r.u16()?;
    let mut headers = BTreeMap::new();
    for _ in 0..count {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        headers.insert(k, v);
    }
    let tag = r.u8()?;
    let len = r.u64()?;
    let start = r.position() as usize;
    if (r.remaining() as u64) < len {
        return Err(r.error(FormatErrorKind::Truncated).into());
    }
    if r.remaining() as u64 > len {
        return Err(r
            .error(FormatErrorKind::TrailingBytes(r.remaining() as u64 - len))
            .into());
    }
    let body = &bytes[start..];
    let shift = |mut e: FormatError| {
        e.offset += start as u64;
        e
    };
    let payload = match tag {
        0 => Payload::Plain(deserialize_model(body).map_err(shift)?),
        1 => Payload::Quantized(deserialize_bundle(body).map_err(|e| match e {
            BundleDecodeError::Format(f) => BundleDecodeError::Format(shift(f)),
            other => other,
        })?),
        2 => Payload::Stream(StreamRef::from_bytes(body).map_err(shift)?),
        value => {
            return Err(FormatError {
                offset: start as u64 - 9,
                kind: FormatErrorKind::InvalidTag {
                    field: "payload",
                    value,
                },
            }
            .into())
        }
    };
    Ok(Message {
        kind,
        headers,
        payload,
    })
}
