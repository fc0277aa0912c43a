//! Logical accounting of bytes buffered in the transmission path.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    current: AtomicU64,
    peak: AtomicU64,
}

/// Shared byte counter with a monotonic high-water mark. Clones observe the
/// same counters, so sender and receiver sides can charge one meter from
/// different threads.
#[derive(Debug, Clone, Default)]
pub struct MemoryMeter {
    inner: Arc<Counters>,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: u64) {
        let now = self.inner.current.fetch_add(bytes, Ordering::AcqRel) + bytes;
        self.inner.peak.fetch_max(now, Ordering::AcqRel);
    }

    pub fn release(&self, bytes: u64) {
        let prev = self.inner.current.fetch_sub(bytes, Ordering::AcqRel);
        assert!(prev >= bytes, "meter released {bytes} bytes with only {prev} held");
    }

    pub fn current(&self) -> u64 {
        self.inner.current.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> u64 {
        self.inner.peak.load(Ordering::Acquire)
    }

    /// Restarts the high-water mark from the current level.
    pub fn reset_peak(&self) {
        self.inner.peak.store(self.current(), Ordering::Release);
    }
}

/// Bytes charged to an optional meter, released on drop.
#[derive(Debug)]
pub struct Reservation {
    meter: Option<MemoryMeter>,
    bytes: u64,
}

impl Reservation {
    pub fn new(meter: Option<&MemoryMeter>, bytes: u64) -> Self {
        if let Some(m) = meter {
            m.alloc(bytes);
        }
        Self {
            meter: meter.cloned(),
            bytes,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// Adjusts the charge to `bytes`.
    pub fn set(&mut self, bytes: u64) {
        if let Some(m) = &self.meter {
            if bytes > self.bytes {
                m.alloc(bytes - self.bytes);
            } else {
                m.release(self.bytes - bytes);
            }
        }
        self.bytes = bytes;
    }

    pub fn grow(&mut self, bytes: u64) {
        self.set(self.bytes + bytes);
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        if let Some(m) = &self.meter {
            m.release(self.bytes);
        }
    }
}

/// Resident set size of this process, where the platform exposes it.
/// Reported for reference only; nothing asserts on it.
pub fn rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}
