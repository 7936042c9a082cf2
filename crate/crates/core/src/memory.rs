//! Byte accounting for long-lived buffers (arena, cache pages, scratch).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
struct Counters {
    current: AtomicUsize,
    peak: AtomicUsize,
    allocations: AtomicUsize,
}

/// Shared tracker. Clones observe the same counters.
#[derive(Debug, Clone, Default)]
pub struct MemoryTracker {
    inner: Arc<Counters>,
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_alloc(&self, bytes: usize) {
        self.inner.allocations.fetch_add(1, Ordering::Relaxed);
        let now = self.inner.current.fetch_add(bytes, Ordering::AcqRel) + bytes;
        self.inner.peak.fetch_max(now, Ordering::AcqRel);
    }

    pub fn record_free(&self, bytes: usize) {
        self.inner.current.fetch_sub(bytes, Ordering::AcqRel);
    }

    pub fn current(&self) -> usize {
        self.inner.current.load(Ordering::Acquire)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::Acquire)
    }

    /// Number of tracked allocations so far.
    pub fn allocations(&self) -> usize {
        self.inner.allocations.load(Ordering::Acquire)
    }
}
