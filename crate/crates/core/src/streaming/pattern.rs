use std::io::{self, Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const BLOCK: usize = 1 << 20;

/// Deterministic pseudo-random byte source of arbitrary length that holds
/// only one 1 MiB block in memory. Each block repeats the same random bytes
/// with its block index folded into the first eight, so no two blocks are
/// equal.
pub struct PatternSource {
    block: Vec<u8>,
    len: u64,
    pos: u64,
}

impl PatternSource {
    pub fn new(len: u64, seed: u64) -> Self {
        let mut block = vec![0u8; BLOCK];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut block);
        Self { block, len, pos: 0 }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Read for PatternSource {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let left = self.len - self.pos;
        if left == 0 || buf.is_empty() {
            return Ok(0);
        }
        let at = (self.pos % BLOCK as u64) as usize;
        let n = buf.len().min(BLOCK - at).min(left as usize);
        let out = &mut buf[..n];
        out.copy_from_slice(&self.block[at..at + n]);
        if at < 8 {
            let counter = (self.pos / BLOCK as u64).to_le_bytes();
            for (i, b) in out.iter_mut().enumerate().take(8 - at) {
                *b ^= counter[at + i];
            }
        }
        self.pos += n as u64;
        Ok(n)
    }
}

/// Passes reads through while hashing them.
pub struct HashingSource<R> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> HashingSource<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            hasher: Sha256::new(),
        }
    }

    pub fn digest(self) -> [u8; 32] {
        self.hasher.finalize().into()
    }
}

impl<R: Read> Read for HashingSource<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }
}

/// Write sink that keeps only a running SHA-256 and byte count.
#[derive(Default)]
pub struct HashingSink {
    hasher: Sha256,
    bytes: u64,
}

impl HashingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn digest(self) -> [u8; 32] {
        self.hasher.finalize().into()
    }
}

impl Write for HashingSink {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.hasher.update(buf);
        self.bytes += buf.len() as u64;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_all(mut r: impl Read, step: usize) -> Vec<u8> {
        let mut out = Vec::new();
        let mut buf = vec![0u8; step];
        loop {
            let n = r.read(&mut buf).unwrap();
            if n == 0 {
                return out;
            }
            out.extend_from_slice(&buf[..n]);
        }
    }

    #[test]
    fn read_granularity_does_not_matter() {
        let len = 2 * BLOCK as u64 + 13;
        let a = read_all(PatternSource::new(len, 4), 1 << 20);
        let b = read_all(PatternSource::new(len, 4), 7);
        assert_eq!(a.len() as u64, len);
        assert_eq!(a, b);
        assert_ne!(a[..BLOCK], a[BLOCK..2 * BLOCK]);
        assert_eq!(a[8..BLOCK], a[BLOCK + 8..2 * BLOCK]);
        assert_ne!(read_all(PatternSource::new(64, 5), 64), a[..64]);
    }

    #[test]
    fn hashes_agree() {
        let mut src = HashingSource::new(PatternSource::new(3000, 1));
        let mut sink = HashingSink::new();
        io::copy(&mut src, &mut sink).unwrap();
        assert_eq!(sink.bytes(), 3000);
        let direct: [u8; 32] = Sha256::digest(read_all(PatternSource::new(3000, 1), 100)).into();
        assert_eq!(src.digest(), direct);
        assert_eq!(sink.digest(), direct);
    }
}
