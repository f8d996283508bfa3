//! Communication reports shared by the multiplication algorithms.

use serde::Serialize;

use crate::transport::{RankCounters, TransportStats};

/// Per-rank traffic of one distributed multiplication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CommReport {
    /// Multiply steps (Cannon) or reduction rounds (tall-and-skinny).
    pub steps: usize,
    pub per_rank: Vec<RankCounters>,
}

impl CommReport {
    pub fn new(steps: usize, stats: TransportStats) -> Self {
        Self {
            steps,
            per_rank: stats.per_rank,
        }
    }

    pub fn max_sent_bytes(&self) -> u64 {
        self.per_rank.iter().map(|r| r.sent_bytes).max().unwrap_or(0)
    }

    pub fn max_recv_bytes(&self) -> u64 {
        self.per_rank.iter().map(|r| r.recv_bytes).max().unwrap_or(0)
    }

    pub fn total_sent_bytes(&self) -> u64 {
        self.per_rank.iter().map(|r| r.sent_bytes).sum()
    }
}
