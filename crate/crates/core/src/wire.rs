//! Little-endian encoding helpers shared by the binary formats.

use std::fmt;
use std::io::{self, Read};

use thiserror::Error;

/// Decoding failure, tagged with the byte offset where it was detected.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{kind} at byte offset {offset}")]
pub struct FormatError {
    pub offset: u64,
    pub kind: FormatErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    UnsupportedVersion(u16),
    Truncated,
    LengthMismatch { expected: u64, actual: u64 },
    InvalidTag { field: &'static str, value: u8 },
    InvalidUtf8,
    EmptyName,
    DuplicateName(String),
    TrailingBytes(u64),
    /// An embedded codebook table that differs from the codebook its id names.
    InvalidCodebook(u8),
    Io(String),
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            Self::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Self::Truncated => write!(f, "truncated stream"),
            Self::LengthMismatch { expected, actual } => {
                write!(f, "length mismatch: expected {expected}, got {actual}")
            }
            Self::InvalidTag { field, value } => write!(f, "invalid {field} tag {value}"),
            Self::InvalidUtf8 => write!(f, "name is not valid UTF-8"),
            Self::EmptyName => write!(f, "empty entry name"),
            Self::DuplicateName(n) => write!(f, "duplicate entry name {n:?}"),
            Self::TrailingBytes(n) => write!(f, "{n} trailing bytes"),
            Self::InvalidCodebook(id) => write!(f, "embedded table does not match codebook {id}"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

/// Reader that tracks its position so errors can report offsets.
pub struct WireReader<R> {
    inner: R,
    pos: u64,
}

impl<'a> WireReader<&'a [u8]> {
    pub fn from_slice(buf: &'a [u8]) -> Self {
        Self::new(buf)
    }

    pub fn remaining(&self) -> usize {
        self.inner.len()
    }
}

impl<R: Read> WireReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    pub fn error(&self, kind: FormatErrorKind) -> FormatError {
        FormatError {
            offset: self.pos,
            kind,
        }
    }

    fn map_io(&self, e: io::Error) -> FormatError {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            self.error(FormatErrorKind::Truncated)
        } else {
            self.error(FormatErrorKind::Io(e.to_string()))
        }
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| self.map_io(e))?;
        self.pos += N as u64;
        Ok(buf)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let start = self.pos;
        let found = self.array::<4>()?;
        if &found != expected {
            return Err(FormatError {
                offset: start,
                kind: FormatErrorKind::BadMagic {
                    expected: *expected,
                    found,
                },
            });
        }
        Ok(())
    }

    /// Reads `len` bytes without trusting `len` for the up-front allocation.
    pub fn bytes(&mut self, len: u64) -> Result<Vec<u8>, FormatError> {
        let mut out = Vec::with_capacity(len.min(1 << 20) as usize);
        let got = (&mut self.inner)
            .take(len)
            .read_to_end(&mut out)
            .map_err(|e| self.map_io(e))? as u64;
        self.pos += got;
        if got != len {
            return Err(self.error(FormatErrorKind::Truncated));
        }
        Ok(out)
    }

    /// A `u16`-length-prefixed, non-empty UTF-8 name.
    pub fn name(&mut self) -> Result<String, FormatError> {
        let start = self.pos;
        let len = self.u16()?;
        let raw = self.bytes(u64::from(len))?;
        if raw.is_empty() {
            return Err(FormatError {
                offset: start,
                kind: FormatErrorKind::EmptyName,
            });
        }
        String::from_utf8(raw).map_err(|_| FormatError {
            offset: start + 2,
            kind: FormatErrorKind::InvalidUtf8,
        })
    }

    pub fn into_inner(self) -> R {
        self.inner
    }
}

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Writes a `u16`-length-prefixed string. Names longer than `u16::MAX` bytes
/// are rejected by the container types before they reach the encoder.
pub fn put_name(out: &mut Vec<u8>, name: &str) {
    let len = u16::try_from(name.len()).expect("name length checked on insert");
    put_u16(out, len);
    out.extend_from_slice(name.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_reads_report_offset() {
        let buf = [1u8, 0, 0];
        let mut r = WireReader::from_slice(&buf);
        assert_eq!(r.u16().unwrap(), 1);
        let err = r.u32().unwrap_err();
        assert_eq!(err.kind, FormatErrorKind::Truncated);
        assert_eq!(err.offset, 2);
    }

    #[test]
    fn bad_magic_points_at_start() {
        let mut r = WireReader::from_slice(b"XXXXrest");
        let err = r.magic(b"FTNS").unwrap_err();
        assert_eq!(err.offset, 0);
        assert!(matches!(err.kind, FormatErrorKind::BadMagic { .. }));
    }

    #[test]
    fn oversized_length_does_not_preallocate() {
        let mut r = WireReader::from_slice(&[0u8; 8]);
        let err = r.bytes(u64::MAX).unwrap_err();
        assert_eq!(err.kind, FormatErrorKind::Truncated);
    }
}
