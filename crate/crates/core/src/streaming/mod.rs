//! Memory-bounded object transfer over SFM.
//!
//! Three settings move a parameter map (or quantized bundle) between peers:
//!
//! * **regular**: the whole object is serialized, then chunked;
//! * **container**: one entry is serialized and sent at a time, as a META
//!   frame carrying the entry header followed by its data frames;
//! * **file**: a file is read and sent one chunk at a time.
//!
//! Every path charges a [`MemoryMeter`] for the bytes it holds, which makes
//! the peak buffering of each setting observable in tests.

mod container;
mod modes;
mod pattern;
mod retriever;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::MessageDecodeError;
use crate::quant::{BundleDecodeError, QuantizedBundle};
use crate::sfm::SfmError;
use crate::tensor::{encode_entry_header, ftns_prefix, EntryHeader, ParameterMap, TensorError};
use crate::wire::{FormatError, FormatErrorKind, WireReader};

pub use crate::meter::{rss_bytes, MemoryMeter, Reservation};
pub use container::{ContainerProducer, ContainerReceiver};
pub use modes::{
    lockstep, pump, receive_container, receive_file, receive_regular, send_regular,
    spool_payload, stream_container, stream_file, FileProducer, FileReceiver, MeteredFrame,
    ObjectReceiver, RegularProducer, RegularReceiver,
};
pub use pattern::{HashingSink, HashingSource, PatternSource};
pub use retriever::{Peer, PeerStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    Regular,
    Container,
    File,
}

impl StreamMode {
    pub const ALL: [StreamMode; 3] = [StreamMode::Regular, StreamMode::Container, StreamMode::File];

    pub fn tag(self) -> u8 {
        match self {
            StreamMode::Regular => 0,
            StreamMode::Container => 1,
            StreamMode::File => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(StreamMode::Regular),
            1 => Some(StreamMode::Container),
            2 => Some(StreamMode::File),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamMode::Regular => "regular",
            StreamMode::Container => "container",
            StreamMode::File => "file",
        }
    }
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StreamMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StreamMode::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown stream mode {s:?} (expected regular, container or file)"))
    }
}

pub const STREAM_REF_LEN: usize = 21;

/// Stand-in for an object the recipient pulls on demand. The source
/// location is implicit: the peer that sent the reference serves it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRef {
    pub ref_id: u64,
    pub mode: StreamMode,
    pub total_bytes: u64,
    pub entry_count: u32,
}

impl StreamRef {
    pub fn to_bytes(&self) -> [u8; STREAM_REF_LEN] {
        let mut out = [0u8; STREAM_REF_LEN];
        out[0..8].copy_from_slice(&self.ref_id.to_le_bytes());
        out[8] = self.mode.tag();
        out[9..17].copy_from_slice(&self.total_bytes.to_le_bytes());
        out[17..21].copy_from_slice(&self.entry_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = WireReader::from_slice(bytes);
        let ref_id = r.u64()?;
        let tag = r.u8()?;
        let mode = StreamMode::from_tag(tag).ok_or_else(|| {
            r.error(FormatErrorKind::InvalidTag {
                field: "stream mode",
                value: tag,
            })
        })?;
        let total_bytes = r.u64()?;
        let entry_count = r.u32()?;
        if r.remaining() != 0 {
            return Err(r.error(FormatErrorKind::TrailingBytes(r.remaining() as u64)));
        }
        Ok(Self {
            ref_id,
            mode,
            total_bytes,
            entry_count,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RefError {
    #[error("stream ref {0} is unknown")]
    Unknown(u64),
    #[error("stream ref {0} was already consumed")]
    Consumed(u64),
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("transport failure{}: {source}", entry.as_ref().map(|e| format!(" while sending {e:?}")).unwrap_or_default())]
    Transport {
        /// Entry in flight when the transport failed, for container streams.
        entry: Option<String>,
        #[source]
        source: SfmError,
    },
    #[error("i/o error on {path:?} at offset {offset}: {reason}")]
    Io {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Bundle(#[from] BundleDecodeError),
    #[error(transparent)]
    Message(#[from] MessageDecodeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ref(#[from] RefError),
    #[error("unexpected stream content: {0}")]
    Unexpected(String),
}

impl From<SfmError> for StreamError {
    fn from(source: SfmError) -> Self {
        StreamError::Transport {
            entry: None,
            source,
        }
    }
}

impl StreamError {
    pub(crate) fn io(path: impl Into<PathBuf>, offset: u64, e: std::io::Error) -> Self {
        StreamError::Io {
            path: path.into(),
            offset,
            reason: e.to_string(),
        }
    }
}

/// An object that serializes as a prefix followed by independent items,
/// each an item header plus bulk data. Concatenating the parts yields the
/// object's regular serialization.
pub trait Itemized {
    fn prefix(&self) -> Vec<u8>;
    fn item_count(&self) -> usize;
    fn item_name(&self, i: usize) -> &str;
    fn item_header(&self, i: usize) -> Vec<u8>;
    fn item_data_len(&self, i: usize) -> u64;
    /// `None` for unmaterialized items.
    fn item_data(&self, i: usize) -> Option<&[u8]>;
}

impl Itemized for ParameterMap {
    fn prefix(&self) -> Vec<u8> {
        ftns_prefix(self.len())
    }

    fn item_count(&self) -> usize {
        self.len()
    }

    fn item_name(&self, i: usize) -> &str {
        self.entry(i).expect("item index in range").0
    }

    fn item_header(&self, i: usize) -> Vec<u8> {
        let (name, tensor) = self.entry(i).expect("item index in range");
        let mut out = Vec::new();
        encode_entry_header(&EntryHeader::for_tensor(name, tensor), &mut out);
        out
    }

    fn item_data_len(&self, i: usize) -> u64 {
        self.entry(i).expect("item index in range").1.byte_len()
    }

    fn item_data(&self, i: usize) -> Option<&[u8]> {
        self.entry(i).expect("item index in range").1.data()
    }
}

impl Itemized for QuantizedBundle {
    fn prefix(&self) -> Vec<u8> {
        self.prefix_bytes()
    }

    fn item_count(&self) -> usize {
        self.entries.len()
    }

    fn item_name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    fn item_header(&self, i: usize) -> Vec<u8> {
        self.entry_header_bytes(i)
    }

    fn item_data_len(&self, i: usize) -> u64 {
        self.entries[i].1.payload().len() as u64
    }

    fn item_data(&self, i: usize) -> Option<&[u8]> {
        Some(self.entries[i].1.payload())
    }
}

/// Length of the regular serialization, computed without serializing.
pub fn serialized_len<T: Itemized + ?Sized>(obj: &T) -> u64 {
    let items: u64 = (0..obj.item_count())
        .map(|i| obj.item_header(i).len() as u64 + obj.item_data_len(i))
        .sum();
    obj.prefix().len() as u64 + items
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_message, serialize_bundle, Precision};
    use crate::tensor::{build_synthetic_model, serialize_model, ModelSpec};

    #[test]
    fn stream_ref_layout() {
        let r = StreamRef {
            ref_id: 0x0102,
            mode: StreamMode::File,
            total_bytes: 7,
            entry_count: 3,
        };
        let b = r.to_bytes();
        assert_eq!(b.len(), 21);
        assert_eq!(b[0], 2);
        assert_eq!(b[8], 2);
        assert_eq!(StreamRef::from_bytes(&b).unwrap(), r);
        assert!(StreamRef::from_bytes(&b[..20]).is_err());
        let mut bad = b;
        bad[8] = 9;
        assert!(StreamRef::from_bytes(&bad).is_err());
    }

    #[test]
    fn items_concatenate_to_regular_serialization() {
        let spec = ModelSpec::llama_3_2_1b().scaled(1 << 14);
        let model = build_synthetic_model(&spec, 1, true).unwrap();
        let mut cat = model.prefix();
        for i in 0..model.item_count() {
            cat.extend(model.item_header(i));
            cat.extend_from_slice(model.item_data(i).unwrap());
        }
        assert_eq!(cat, serialize_model(&model).unwrap());
        assert_eq!(serialized_len(&model), cat.len() as u64);

        for p in Precision::ALL {
            let b = quantize_message(&model, p).unwrap();
            let mut cat = b.prefix();
            for i in 0..b.item_count() {
                cat.extend(b.item_header(i));
                cat.extend_from_slice(b.item_data(i).unwrap());
            }
            assert_eq!(cat, serialize_bundle(&b), "{p}");
            assert_eq!(serialized_len(&b), cat.len() as u64);
        }
    }

    #[test]
    fn mode_names() {
        for m in StreamMode::ALL {
            assert_eq!(m.name().parse::<StreamMode>(), Ok(m));
            assert_eq!(StreamMode::from_tag(m.tag()), Some(m));
        }
        assert!("bulk".parse::<StreamMode>().is_err());
    }
}
