//! Buffer pool for densification copies.
//!
//! Repeated multiplications reuse the same arena sizes, so returned buffers
//! are handed out again instead of reallocated. Counters make the reuse
//! observable.

use serde::Serialize;

/// Observable pool behavior.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PoolStats {
    /// Buffers allocated fresh because nothing of the right size was free.
    pub fresh_allocs: u64,
    /// Buffers served from the free list.
    pub reuses: u64,
}

/// Free-list of f64 arenas keyed by exact length.
#[derive(Debug, Default)]
pub struct MemoryPool {
    free: Vec<Vec<f64>>,
    stats: PoolStats,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zeroed buffer of exactly `len` elements.
    pub fn take(&mut self, len: usize) -> Vec<f64> {
        if let Some(pos) = self.free.iter().position(|b| b.len() == len) {
            let mut buf = self.free.swap_remove(pos);
            buf.fill(0.0);
            self.stats.reuses += 1;
            buf
        } else {
            self.stats.fresh_allocs += 1;
            vec![0.0; len]
        }
    }

    /// Returns a buffer to the free list.
    pub fn put(&mut self, buf: Vec<f64>) {
        if !buf.is_empty() {
            self.free.push(buf);
        }
    }

    pub fn stats(&self) -> PoolStats {
        self.stats
    }
}
