//! Message-level quantization and the FTQB bundle format.
//!
//! ```text
//! "FTQB" | version u16 | precision u8
//! blockwise precisions:
//!   entry_count u32, then per entry:
//!   name (u16 len + bytes) | original dtype u8 | ndim u8 | ndim x u64 |
//!   codebook_id u8 | block_size u32 | pad_count u8 |
//!   absmax_len u32 | absmax_len x f32 | code_len u16 | code_len x f32 |
//!   packed_len u64 | packed bytes
//! fp16 / bf16:
//!   passthrough_count u32 | passthrough_count x u32 entry index | FTNS blob
//! ```
//! Entries that were not FP32 on input travel untouched. In blockwise
//! bundles they use codebook id 0xFF with the raw tensor bytes as payload.
//! Quantized entries carry their codebook's level table, which the decoder
//! checks against its own copy; untouched entries carry an empty table.

use std::collections::HashSet;
use std::io::Read;

use super::blockwise::{dequantize_tensor, quantize_tensor_blockwise, QuantizedTensor};
use super::cast::{cast_16, uncast_16};
use super::codebook::{Codebook, CodebookId};
use super::{CodecError, CodecErrorKind, Precision};
use crate::tensor::{
    decode_entry_header, encode_entry_header, DType, EntryHeader, ParameterMap, Tensor,
    FTNS_MAGIC, FTNS_VERSION,
};
use crate::wire::{put_name, put_u16, put_u32, put_u64, FormatError, FormatErrorKind, WireReader};

pub const FTQB_MAGIC: &[u8; 4] = b"FTQB";
pub const FTQB_VERSION: u16 = 1;
/// Codebook id marking an untouched tensor inside a blockwise bundle.
pub const PASSTHROUGH_CODEBOOK: u8 = 0xFF;

#[derive(Debug, Clone, PartialEq)]
pub enum BundleEntry {
    Quantized(QuantizedTensor),
    /// FP32 input cast to 16 bits.
    Cast(Tensor),
    /// Non-FP32 input carried unmodified.
    Passthrough(Tensor),
}

impl BundleEntry {
    /// Bulk bytes on the wire (packed codes or tensor data).
    pub fn payload(&self) -> &[u8] {
        match self {
            BundleEntry::Quantized(q) => &q.packed,
            BundleEntry::Cast(t) | BundleEntry::Passthrough(t) => {
                t.data().expect("bundle tensors are materialized")
            }
        }
    }

    pub fn meta_bytes(&self) -> u64 {
        match self {
            BundleEntry::Quantized(q) => q.meta_bytes(),
            _ => 0,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        matches!(self, BundleEntry::Passthrough(_))
    }
}

/// A quantized parameter map, entry order preserved.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBundle {
    pub precision: Precision,
    pub entries: Vec<(String, BundleEntry)>,
}

impl QuantizedBundle {
    pub fn payload_bytes(&self) -> u64 {
        self.entries.iter().map(|(_, e)| e.payload().len() as u64).sum()
    }

    /// Absmax arrays plus one fp32 codebook per quantized tensor.
    pub fn meta_bytes(&self) -> u64 {
        self.entries.iter().map(|(_, e)| e.meta_bytes()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn passthrough_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.is_passthrough())
            .map(|(n, _)| n.as_str())
    }

    fn is_half(&self) -> bool {
        self.precision.half_kind().is_some()
    }

    /// Everything before the first entry.
    pub fn prefix_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FTQB_MAGIC);
        put_u16(&mut out, FTQB_VERSION);
        out.push(self.precision.tag());
        let count = u32::try_from(self.entries.len()).expect("entry count fits in u32");
        if self.is_half() {
            let pass: Vec<u32> = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, (_, e))| e.is_passthrough())
                .map(|(i, _)| i as u32)
                .collect();
            put_u32(&mut out, pass.len() as u32);
            for i in pass {
                put_u32(&mut out, i);
            }
            out.extend_from_slice(FTNS_MAGIC);
            put_u16(&mut out, FTNS_VERSION);
        }
        put_u32(&mut out, count);
        out
    }

    /// Header of entry `i` (everything up to its bulk payload).
    pub fn entry_header_bytes(&self, i: usize) -> Vec<u8> {
        let (name, entry) = &self.entries[i];
        let mut out = Vec::new();
        encode_bundle_entry_header(self.precision, name, entry, &mut out);
        out
    }
}

pub fn encode_bundle_entry_header(
    precision: Precision,
    name: &str,
    entry: &BundleEntry,
    out: &mut Vec<u8>,
) {
    if precision.half_kind().is_some() {
        let tensor = match entry {
            BundleEntry::Cast(t) | BundleEntry::Passthrough(t) => t,
            BundleEntry::Quantized(_) => panic!("16-bit bundles hold no blockwise entries"),
        };
        encode_entry_header(&EntryHeader::for_tensor(name, tensor), out);
        return;
    }
    put_name(out, name);
    match entry {
        BundleEntry::Quantized(q) => {
            out.push(q.original_dtype.tag());
            put_shape(out, &q.original_shape);
            out.push(q.codebook_id.tag());
            put_u32(out, q.block_size);
            out.push(q.pad_count);
            put_u32(out, q.absmax.len() as u32);
            for a in &q.absmax {
                out.extend_from_slice(&a.to_le_bytes());
            }
            let code = Codebook::shared(q.codebook_id).values();
            put_u16(out, code.len() as u16);
            for v in code {
                out.extend_from_slice(&v.to_le_bytes());
            }
            put_u64(out, q.packed.len() as u64);
        }
        BundleEntry::Cast(t) | BundleEntry::Passthrough(t) => {
            out.push(t.dtype().tag());
            put_shape(out, t.shape());
            out.push(PASSTHROUGH_CODEBOOK);
            put_u32(out, 0);
            out.push(0);
            put_u32(out, 0);
            put_u16(out, 0);
            put_u64(out, t.byte_len());
        }
    }
}

fn put_shape(out: &mut Vec<u8>, shape: &[u64]) {
    out.push(u8::try_from(shape.len()).expect("tensor rank fits in u8"));
    for &d in shape {
        put_u64(out, d);
    }
}

/// Decoded bundle prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundlePrefix {
    pub precision: Precision,
    pub entry_count: u32,
    pub passthrough: HashSet<u32>,
}

pub fn read_bundle_prefix<R: Read>(r: &mut WireReader<R>) -> Result<BundlePrefix, FormatError> {
    r.magic(FTQB_MAGIC)?;
    let version = r.u16()?;
    if version != FTQB_VERSION {
        return Err(r.error(FormatErrorKind::UnsupportedVersion(version)));
    }
    let tag = r.u8()?;
    let precision = Precision::from_tag(tag).ok_or_else(|| {
        r.error(FormatErrorKind::InvalidTag {
            field: "precision",
            value: tag,
        })
    })?;
    let mut passthrough = HashSet::new();
    if precision.half_kind().is_some() {
        let n = r.u32()?;
        for _ in 0..n {
            passthrough.insert(r.u32()?);
        }
        r.magic(FTNS_MAGIC)?;
        let v = r.u16()?;
        if v != FTNS_VERSION {
            return Err(r.error(FormatErrorKind::UnsupportedVersion(v)));
        }
    }
    let entry_count = r.u32()?;
    Ok(BundlePrefix {
        precision,
        entry_count,
        passthrough,
    })
}

/// An entry header whose bulk payload has not been read yet.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryPrefix {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    /// `None` for tensors carried as raw bytes.
    pub quant: Option<(CodebookId, u32, u8, Vec<f32>)>,
    pub data_len: u64,
}

impl EntryPrefix {
    /// Attaches the payload. `passthrough` only matters for 16-bit bundles,
    /// where the flag lives in the bundle prefix instead of the entry.
    pub fn finish(self, data: Vec<u8>, passthrough: bool, precision: Precision) -> Result<(String, BundleEntry), CodecError> {
        let entry = match self.quant {
            Some((codebook_id, block_size, pad_count, absmax)) => {
                BundleEntry::Quantized(QuantizedTensor {
                    original_dtype: self.dtype,
                    original_shape: self.shape,
                    codebook_id,
                    block_size,
                    packed: data,
                    absmax,
                    pad_count,
                })
            }
            None => {
                let tensor = Tensor::new(self.dtype, self.shape, data)
                    .map_err(|e| CodecErrorKind::Malformed(e.to_string()))
                    .map_err(|k| CodecError::from(k).in_entry(&self.name))?;
                let cast = precision.half_kind().map(|k| k.dtype());
                if passthrough || cast != Some(tensor.dtype()) {
                    BundleEntry::Passthrough(tensor)
                } else {
                    BundleEntry::Cast(tensor)
                }
            }
        };
        Ok((self.name, entry))
    }
}

pub fn decode_bundle_entry_header<R: Read>(
    r: &mut WireReader<R>,
    precision: Precision,
) -> Result<EntryPrefix, FormatError> {
    if precision.half_kind().is_some() {
        let h = decode_entry_header(r)?;
        return Ok(EntryPrefix {
            name: h.name,
            dtype: h.dtype,
            shape: h.shape,
            quant: None,
            data_len: h.data_len,
        });
    }
    let name = r.name()?;
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| {
        r.error(FormatErrorKind::InvalidTag {
            field: "dtype",
            value: tag,
        })
    })?;
    let ndim = r.u8()?;
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        shape.push(r.u64()?);
    }
    let cb_tag = r.u8()?;
    let block_size = r.u32()?;
    let pad_count = r.u8()?;
    let absmax_len = r.u32()?;
    let mut absmax = Vec::with_capacity(absmax_len.min(1 << 16) as usize);
    for _ in 0..absmax_len {
        absmax.push(r.f32()?);
    }
    let code_len = r.u16()?;
    let mut code = Vec::with_capacity(code_len as usize);
    for _ in 0..code_len {
        code.push(r.f32()?);
    }
    let data_len = r.u64()?;
    let quant = if cb_tag == PASSTHROUGH_CODEBOOK {
        if !code.is_empty() {
            return Err(r.error(FormatErrorKind::InvalidCodebook(cb_tag)));
        }
        None
    } else {
        let id = CodebookId::from_tag(cb_tag).ok_or_else(|| {
            r.error(FormatErrorKind::InvalidTag {
                field: "codebook",
                value: cb_tag,
            })
        })?;
        let known = Codebook::shared(id).values();
        let same = code.len() == known.len()
            && code.iter().zip(known).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(r.error(FormatErrorKind::InvalidCodebook(cb_tag)));
        }
        Some((id, block_size, pad_count, absmax))
    };
    Ok(EntryPrefix {
        name,
        dtype,
        shape,
        quant,
        data_len,
    })
}

/// Writes the bundle one entry at a time.
pub fn write_bundle<W: std::io::Write>(bundle: &QuantizedBundle, w: &mut W) -> std::io::Result<()> {
    w.write_all(&bundle.prefix_bytes())?;
    for (i, (_, entry)) in bundle.entries.iter().enumerate() {
        w.write_all(&bundle.entry_header_bytes(i))?;
        w.write_all(entry.payload())?;
    }
    Ok(())
}

pub fn serialize_bundle(bundle: &QuantizedBundle) -> Vec<u8> {
    let mut out = Vec::new();
    write_bundle(bundle, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Bundle decoding failure: either framing or entry contents.
#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum BundleDecodeError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub fn read_bundle<R: Read>(r: &mut WireReader<R>) -> Result<QuantizedBundle, BundleDecodeError> {
    let prefix = read_bundle_prefix(r)?;
    let mut entries = Vec::with_capacity(prefix.entry_count.min(1 << 16) as usize);
    let mut names = HashSet::new();
    for i in 0..prefix.entry_count {
        let at = r.position();
        let header = decode_bundle_entry_header(r, prefix.precision)?;
        if !names.insert(header.name.clone()) {
            return Err(FormatError {
                offset: at,
                kind: FormatErrorKind::DuplicateName(header.name),
            }
            .into());
        }
        let data = r.bytes(header.data_len)?;
        entries.push(header.finish(data, prefix.passthrough.contains(&i), prefix.precision)?);
    }
    Ok(QuantizedBundle {
        precision: prefix.precision,
        entries,
    })
}

pub fn deserialize_bundle(bytes: &[u8]) -> Result<QuantizedBundle, BundleDecodeError> {
    let mut r = WireReader::from_slice(bytes);
    let bundle = read_bundle(&mut r)?;
    if r.remaining() != 0 {
        return Err(r
            .error(FormatErrorKind::TrailingBytes(r.remaining() as u64))
            .into());
    }
    Ok(bundle)
}

/// Quantizes every FP32 entry; other dtypes pass through unmodified.
pub fn quantize_message(m: &ParameterMap, precision: Precision) -> Result<QuantizedBundle, CodecError> {
    let codebook = precision.codebook().map(Codebook::build);
    let mut entries = Vec::with_capacity(m.len());
    for (name, tensor) in m.iter() {
        if !tensor.is_materialized() {
            return Err(CodecError::from(CodecErrorKind::Unmaterialized).in_entry(name));
        }
        let entry = if tensor.dtype() != DType::Fp32 {
            BundleEntry::Passthrough(tensor.clone())
        } else if let Some(kind) = precision.half_kind() {
            BundleEntry::Cast(cast_16(tensor, kind).map_err(|e| e.in_entry(name))?)
        } else {
            let cb = codebook.as_ref().expect("blockwise precision has a codebook");
            let block = precision.block_size().expect("blockwise precision has a block size");
            BundleEntry::Quantized(
                quantize_tensor_blockwise(tensor, cb, block).map_err(|e| e.in_entry(name))?,
            )
        };
        entries.push((name.to_owned(), entry));
    }
    Ok(QuantizedBundle { precision, entries })
}

/// Restores FP32 tensors (and untouched passthrough tensors) in entry order.
pub fn dequantize_message(b: &QuantizedBundle) -> Result<ParameterMap, CodecError> {
    let mut out = ParameterMap::new();
    let mut codebooks: Vec<Codebook> = Vec::new();
    for (name, entry) in &b.entries {
        let tensor = match entry {
            BundleEntry::Quantized(q) => {
                let cb = match codebooks.iter().position(|c| c.id() == q.codebook_id) {
                    Some(i) => &codebooks[i],
                    None => {
                        codebooks.push(Codebook::build(q.codebook_id));
                        codebooks.last().expect("just pushed")
                    }
                };
                dequantize_tensor(q, cb).map_err(|e| e.in_entry(name))?
            }
            BundleEntry::Cast(t) => uncast_16(t).map_err(|e| e.in_entry(name))?,
            BundleEntry::Passthrough(t) => t.clone(),
        };
        out.insert(name.clone(), tensor).map_err(|e| {
            CodecError::from(CodecErrorKind::Malformed(e.to_string())).in_entry(name)
        })?;
    }
    Ok(out)
}
