use std::io::{self, Read, Write};

use super::{flags, SfmError, MAX_CHUNK};

pub const FRAME_MAGIC: u16 = u16::from_le_bytes(*b"SF");
pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub flags: u8,
    pub stream_id: u64,
    pub seq: u32,
    /// CRC-32 as carried on the wire; [`Frame::new`] computes it.
    pub crc: u32,
    pub payload: Vec<u8>,
}

impl std::fmt::Debug for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frame")
            .field("flags", &self.flags)
            .field("stream_id", &self.stream_id)
            .field("seq", &self.seq)
            .field("crc", &format_args!("{:#010x}", self.crc))
            .field("len", &self.payload.len())
            .finish()
    }
}

impl Frame {
    pub fn new(stream_id: u64, seq: u32, flags: u8, payload: Vec<u8>) -> Self {
        assert!(payload.len() <= MAX_CHUNK, "frame payload over 1 MiB");
        Self {
            flags,
            stream_id,
            seq,
            crc: crc32fast::hash(&payload),
            payload,
        }
    }

    pub fn is_begin(&self) -> bool {
        self.flags & flags::BEGIN != 0
    }

    pub fn is_end(&self) -> bool {
        self.flags & flags::END != 0
    }

    pub fn is_meta(&self) -> bool {
        self.flags & flags::META != 0
    }

    pub fn crc_ok(&self) -> bool {
        crc32fast::hash(&self.payload) == self.crc
    }

    /// Header plus payload bytes on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[0..2].copy_from_slice(&FRAME_MAGIC.to_le_bytes());
        h[2] = FRAME_VERSION;
        h[3] = self.flags;
        h[4..12].copy_from_slice(&self.stream_id.to_le_bytes());
        h[12..16].copy_from_slice(&self.seq.to_le_bytes());
        h[16..20].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        h[20..24].copy_from_slice(&self.crc.to_le_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)
    }

    /// Parses a header, returning the frame with an empty payload and the
    /// payload length still to be read. The CRC is not checked here.
    pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<(Frame, usize), SfmError> {
        let magic = u16::from_le_bytes([h[0], h[1]]);
        if magic != FRAME_MAGIC {
            return Err(SfmError::MalformedFrame(format!("bad magic {magic:#06x}")));
        }
        if h[2] != FRAME_VERSION {
            return Err(SfmError::MalformedFrame(format!("unsupported version {}", h[2])));
        }
        let flags = h[3];
        if flags & !(flags::BEGIN | flags::END | flags::META) != 0 {
            return Err(SfmError::MalformedFrame(format!("unknown flags {flags:#04x}")));
        }
        let le32 = |at: usize| u32::from_le_bytes(h[at..at + 4].try_into().unwrap());
        let len = le32(16) as usize;
        if len > MAX_CHUNK {
            return Err(SfmError::MalformedFrame(format!("payload_len {len} over limit")));
        }
        let frame = Frame {
            flags,
            stream_id: u64::from_le_bytes(h[4..12].try_into().unwrap()),
            seq: le32(12),
            crc: le32(20),
            payload: Vec::new(),
        };
        Ok((frame, len))
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, SfmError> {
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| SfmError::MalformedFrame("short header".into()))?;
        let (mut frame, len) = Frame::parse_header(header)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != len {
            return Err(SfmError::MalformedFrame(format!(
                "payload_len {len} but {} bytes follow",
                body.len()
            )));
        }
        frame.payload = body.to_vec();
        Ok(frame)
    }

    /// Reads one frame. `Ok(None)` on a clean end of stream before any
    /// header byte.
    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Option<Result<Frame, SfmError>>> {
        let mut h = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            match r.read(&mut h[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        let (mut frame, len) = match Frame::parse_header(&h) {
            Ok(v) => v,
            Err(e) => return Ok(Some(Err(e))),
        };
        frame.payload = vec![0; len];
        r.read_exact(&mut frame.payload)?;
        Ok(Some(Ok(frame)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let f = Frame::new(0x0102_0304_0506_0708, 9, flags::BEGIN | flags::END, b"abc".to_vec());
        let bytes = f.encode();
        assert_eq!(bytes.len(), 27);
        assert_eq!(&bytes[..4], &[b'S', b'F', 1, 3]);
        assert_eq!(&bytes[4..12], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[12..16], &[9, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[3, 0, 0, 0]);
        // CRC-32/IEEE("abc")
        assert_eq!(&bytes[20..24], &0x3524_41c2u32.to_le_bytes());
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
        let mut cur = std::io::Cursor::new(&bytes);
        assert_eq!(Frame::read_from(&mut cur).unwrap().unwrap().unwrap(), f);
        assert!(Frame::read_from(&mut cur).unwrap().is_none());
    }

    #[test]
    fn malformed_headers() {
        let good = Frame::new(1, 0, flags::BEGIN, vec![0; 4]).encode();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Frame::decode(&bad), Err(SfmError::MalformedFrame(_))));
        let mut bad = good.clone();
        bad[3] = 0x80;
        assert!(matches!(Frame::decode(&bad), Err(SfmError::MalformedFrame(_))));
        let mut bad = good.clone();
        bad[16..20].copy_from_slice(&((MAX_CHUNK + 1) as u32).to_le_bytes());
        assert!(matches!(Frame::decode(&bad), Err(SfmError::MalformedFrame(_))));
        assert!(Frame::decode(&good[..good.len() - 1]).is_err());
        assert!(Frame::decode(&good[..10]).is_err());
    }

    #[test]
    fn crc_detects_flip() {
        let mut f = Frame::new(1, 0, 0, vec![7; 100]);
        assert!(f.crc_ok());
        f.payload[50] ^= 1;
        assert!(!f.crc_ok());
    }
}
