//! Distributed blocked matrix-matrix multiplication engine.
//!
//! Matrices live in a blocked compressed-sparse-row format, block-cyclic
//! distributed over a 2D grid of ranks that run as threads inside one
//! process on a deterministic message-passing fabric with per-rank byte
//! counters. Two data-layout exchange algorithms are provided: Cannon's
//! algorithm for general shapes and a 1D K-decomposition with a tree
//! reduction for products with one large dimension. Per-rank work flows
//! through capped multiplication batches statically scheduled over worker
//! threads onto parametrized small-block kernels, with an optional
//! densification pass that coalesces each worker's blocks into one large
//! dense block first.

pub mod cannon;
pub mod dense;
pub mod densify;
pub mod dist;
pub mod error;
pub mod kernel;
pub mod layout;
pub mod local;
pub mod pool;
pub mod report;
pub mod tallskinny;
pub mod transport;

pub use cannon::{cannon_multiply, skew_align, MultiplyOutcome, SkewSide};
pub use dist::{gather, scatter, BlockCyclicMap, ProcessGrid};
pub use error::{Error, Result};
pub use layout::{BlockDims, BlockedMatrix};
pub use local::{LocalConfig, StackStats, DEFAULT_STACK_CAP};
pub use report::CommReport;
pub use tallskinny::{tall_skinny_multiply, KBlockMap, ReduceMode, TallSkinnyOptions};

/// Data-layout exchange algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Cannon,
    TallSkinny,
}

/// Advisory selection rule: the 1D algorithm pays off once K dwarfs the
/// result dimensions. Callers are free to override.
pub fn auto_algorithm(m: usize, n: usize, k: usize) -> Algorithm {
    if k >= 32 * m.max(n) {
        Algorithm::TallSkinny
    } else {
        Algorithm::Cannon
    }
}
