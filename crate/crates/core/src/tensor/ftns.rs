//! FTNS: the named-tensor serialization format.
//!
//! ```text
//! "FTNS" | version u16 | entry_count u32
//! per entry: name_len u16 | name | dtype u8 | ndim u8 | ndim x u64 | data_len u64 | data
//! ```
//! All integers are little-endian.

use std::io::{self, Read, Write};

use super::{element_count, DType, ParameterMap, Tensor, TensorError};
use crate::wire::{put_name, put_u16, put_u32, put_u64, FormatError, FormatErrorKind, WireReader};

pub const FTNS_MAGIC: &[u8; 4] = b"FTNS";
pub const FTNS_VERSION: u16 = 1;
/// magic + version + entry_count
pub const FTNS_HEADER_LEN: usize = 10;

/// The per-entry header that precedes raw tensor bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryHeader {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub data_len: u64,
}

impl EntryHeader {
    pub fn for_tensor(name: &str, tensor: &Tensor) -> Self {
        Self {
            name: name.to_owned(),
            dtype: tensor.dtype(),
            shape: tensor.shape().to_vec(),
            data_len: tensor.byte_len(),
        }
    }
}

pub fn encode_entry_header(header: &EntryHeader, out: &mut Vec<u8>) {
    put_name(out, &header.name);
    out.push(header.dtype.tag());
    out.push(u8::try_from(header.shape.len()).expect("tensor rank fits in u8"));
    for &d in &header.shape {
        put_u64(out, d);
    }
    put_u64(out, header.data_len);
}

pub fn decode_entry_header<R: Read>(r: &mut WireReader<R>) -> Result<EntryHeader, FormatError> {
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
    let at = r.position();
    let data_len = r.u64()?;
    let expected = element_count(&shape)
        .checked_mul(dtype.width() as u64)
        .ok_or_else(|| {
            r.error(FormatErrorKind::LengthMismatch {
                expected: u64::MAX,
                actual: data_len,
            })
        })?;
    if data_len != expected {
        return Err(FormatError {
            offset: at,
            kind: FormatErrorKind::LengthMismatch {
                expected,
                actual: data_len,
            },
        });
    }
    Ok(EntryHeader {
        name,
        dtype,
        shape,
        data_len,
    })
}

pub fn header_bytes(count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(FTNS_HEADER_LEN);
    out.extend_from_slice(FTNS_MAGIC);
    put_u16(&mut out, FTNS_VERSION);
    put_u32(&mut out, u32::try_from(count).expect("entry count fits in u32"));
    out
}

/// Streams a materialized model to `w` one entry at a time.
pub fn write_model<W: Write>(model: &ParameterMap, w: &mut W) -> io::Result<()> {
    w.write_all(&header_bytes(model.len()))?;
    let mut hdr = Vec::new();
    for (name, tensor) in model.iter() {
        let data = tensor.data().ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                TensorError::Unmaterialized(name.to_owned()),
            )
        })?;
        hdr.clear();
        encode_entry_header(&EntryHeader::for_tensor(name, tensor), &mut hdr);
        w.write_all(&hdr)?;
        w.write_all(data)?;
    }
    Ok(())
}

pub fn serialize_model(model: &ParameterMap) -> Result<Vec<u8>, TensorError> {
    if let Some((name, _)) = model.iter().find(|(_, t)| !t.is_materialized()) {
        return Err(TensorError::Unmaterialized(name.to_owned()));
    }
    let mut out = Vec::with_capacity(FTNS_HEADER_LEN + model.size_bytes() as usize);
    write_model(model, &mut out).expect("writing to a Vec cannot fail");
    Ok(out)
}

/// Decodes one FTNS model from a reader, leaving any bytes after it unread.
pub fn read_model<R: Read>(r: &mut WireReader<R>) -> Result<ParameterMap, FormatError> {
    r.magic(FTNS_MAGIC)?;
    let version = r.u16()?;
    if version != FTNS_VERSION {
        return Err(FormatError {
            offset: 4,
            kind: FormatErrorKind::UnsupportedVersion(version),
        });
    }
    let count = r.u32()?;
    let mut model = ParameterMap::new();
    for _ in 0..count {
        let at = r.position();
        let header = decode_entry_header(r)?;
        let data = r.bytes(header.data_len)?;
        let tensor = Tensor::new(header.dtype, header.shape, data)
            .expect("data length validated against header");
        model.insert(header.name, tensor).map_err(|e| FormatError {
            offset: at,
            kind: match e {
                TensorError::DuplicateName(n) => FormatErrorKind::DuplicateName(n),
                _ => FormatErrorKind::EmptyName,
            },
        })?;
    }
    Ok(model)
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ParameterMap, FormatError> {
    let mut r = WireReader::from_slice(bytes);
    let model = read_model(&mut r)?;
    if r.remaining() != 0 {
        return Err(r.error(FormatErrorKind::TrailingBytes(r.remaining() as u64)));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_map_is_ten_bytes() {
        let blob = serialize_model(&ParameterMap::new()).unwrap();
        assert_eq!(blob, b"FTNS\x01\x00\x00\x00\x00\x00");
        assert_eq!(blob.len(), FTNS_HEADER_LEN);
    }

    #[test]
    fn single_scalar_layout() {
        let mut m = ParameterMap::new();
        m.insert("a", Tensor::from_f32(vec![1], &[1.0])).unwrap();
        let blob = serialize_model(&m).unwrap();
        let mut expected = b"FTNS\x01\x00\x01\x00\x00\x00".to_vec();
        expected.extend_from_slice(&[1, 0, b'a', 0, 1]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&4u64.to_le_bytes());
        expected.extend_from_slice(&[0x00, 0x00, 0x80, 0x3F]);
        assert_eq!(blob, expected);
    }

    #[test]
    fn errors_carry_offsets() {
        let mut m = ParameterMap::new();
        m.insert("w", Tensor::from_f32(vec![2], &[1.0, 2.0])).unwrap();
        let blob = serialize_model(&m).unwrap();

        let mut bad = blob.clone();
        bad[0] = b'X';
        let e = deserialize_model(&bad).unwrap_err();
        assert!(matches!(e.kind, FormatErrorKind::BadMagic { .. }));
        assert_eq!(e.offset, 0);

        let mut bad = blob.clone();
        bad[4] = 9;
        assert_eq!(
            deserialize_model(&bad).unwrap_err().kind,
            FormatErrorKind::UnsupportedVersion(9)
        );

        let e = deserialize_model(&blob[..blob.len() - 3]).unwrap_err();
        assert_eq!(e.kind, FormatErrorKind::Truncated);
        assert_eq!(e.offset, blob.len() as u64 - 3);

        // data_len lies about the extent product
        let mut bad = blob.clone();
        let len_at = 10 + 2 + 1 + 1 + 1 + 8;
        bad[len_at] = 12;
        let e = deserialize_model(&bad).unwrap_err();
        assert_eq!(e.offset, len_at as u64);
        assert!(matches!(
            e.kind,
            FormatErrorKind::LengthMismatch {
                expected: 8,
                actual: 12
            }
        ));

        let mut long = blob.clone();
        long.push(0);
        assert_eq!(
            deserialize_model(&long).unwrap_err().kind,
            FormatErrorKind::TrailingBytes(1)
        );
    }

    #[test]
    fn unmaterialized_models_cannot_be_serialized() {
        let mut m = ParameterMap::new();
        m.insert("x", Tensor::unmaterialized(DType::Fp32, vec![3]))
            .unwrap();
        assert_eq!(
            serialize_model(&m),
            Err(TensorError::Unmaterialized("x".into()))
        );
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (0u8..4, prop::collection::vec(0u64..5, 0..3)).prop_flat_map(|(tag, shape)| {
            let dtype = DType::from_tag(tag).unwrap();
            let len = element_count(&shape) as usize * dtype.width();
            prop::collection::vec(any::<u8>(), len)
                .prop_map(move |data| Tensor::new(dtype, shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(entries in prop::collection::vec(("[a-z.]{1,12}", arb_tensor()), 0..6)) {
            let mut m = ParameterMap::new();
            for (name, t) in entries {
                let _ = m.insert(name, t);
            }
            let blob = serialize_model(&m).unwrap();
            let back = deserialize_model(&blob).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(serialize_model(&back).unwrap(), blob.clone());
            let data_total: usize = m.iter().map(|(_, t)| t.data().unwrap().len()).sum();
            prop_assert_eq!(m.size_bytes(), data_total as u64);
        }
    }
}
