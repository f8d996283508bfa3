//! Distributed `C += A * B` over a square grid via Cannon's algorithm.
//!
//! Panels are block-cyclic, so each rank's whole local panel is the Cannon
//! tile and a "shift" ships the full panel to the grid neighbor. The
//! initial skew is a pure relabeling of which rank starts with which panel
//! and is applied before the rank workers launch ([`skew_align`]); it is
//! folded into distribution, so the transport counters measure exactly the
//! shift phase: `P - 1` steps of one A panel plus one B panel per rank.
//!
//! Receives for step `s+1` are posted before step `s`'s local multiply, so
//! communication overlaps computation; correctness never depends on it.

use crate::dist::ProcessGrid;
use crate::error::{Error, Result};
use crate::layout::BlockedMatrix;
use crate::local::{local_multiply, LocalConfig, StackStats};
use crate::report::CommReport;
use crate::transport::{spmd_run_with, TransportConfig};

/// Which operand a skew realigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkewSide {
    /// Row r shifts left by r: rank (r, c) takes the panel of (r, (c+r) mod P).
    A,
    /// Column c shifts up by c: rank (r, c) takes the panel of ((r+c) mod P, c).
    B,
}

/// Cannon pre-skew as a permutation of the per-rank panel list.
pub fn skew_align(
    panels: &[BlockedMatrix],
    grid: ProcessGrid,
    side: SkewSide,
) -> Result<Vec<BlockedMatrix>> {
    let p = grid.side()?;
    if panels.len() != grid.size() {
        return Err(Error::ShapeMismatch(format!(
            "{} panels for a grid of {} ranks",
            panels.len(),
            grid.size()
        )));
    }
    let mut out = Vec::with_capacity(panels.len());
    for rank in 0..grid.size() {
        let (r, c) = grid.coords_of(rank);
        let src = match side {
            SkewSide::A => grid.rank_of(r, (c + r) % p),
            SkewSide::B => grid.rank_of((r + c) % p, c),
        };
        out.push(panels[src].clone());
    }
    Ok(out)
}

/// Result of one distributed multiplication.
#[derive(Debug)]
pub struct MultiplyOutcome {
    pub c_panels: Vec<BlockedMatrix>,
    pub comm: CommReport,
    pub stacks: StackStats,
}

/// Runs Cannon's algorithm: skew, then P shift-multiply steps. `c_panels`
/// act as accumulators (`C += A * B`).
pub fn cannon_multiply(
    a_panels: &[BlockedMatrix],
    b_panels: &[BlockedMatrix],
    grid: ProcessGrid,
    c_panels: Vec<BlockedMatrix>,
    cfg: &LocalConfig,
) -> Result<MultiplyOutcome> {
    cannon_multiply_with(
        a_panels,
        b_panels,
        grid,
        c_panels,
        cfg,
        &TransportConfig::default(),
    )
}

/// [`cannon_multiply`] with explicit transport configuration.
pub fn cannon_multiply_with(
    a_panels: &[BlockedMatrix],
    b_panels: &[BlockedMatrix],
    grid: ProcessGrid,
    c_panels: Vec<BlockedMatrix>,
    cfg: &LocalConfig,
    transport: &TransportConfig,
) -> Result<MultiplyOutcome> {
    let side = grid.side()?;
    if a_panels.len() != grid.size()
        || b_panels.len() != grid.size()
        || c_panels.len() != grid.size()
    {
        return Err(Error::ShapeMismatch(format!(
            "panel counts ({}, {}, {}) for a grid of {} ranks",
            a_panels.len(),
            b_panels.len(),
            c_panels.len(),
            grid.size()
        )));
    }
    let a_skewed = skew_align(a_panels, grid, SkewSide::A)?;
    let b_skewed = skew_align(b_panels, grid, SkewSide::B)?;

    let (results, stats) = spmd_run_with::<BlockedMatrix, _, _>(&grid, transport, |ctx| {
        let rank = ctx.rank();
        let (r, c) = ctx.coords();
        let mut a_cur = a_skewed[rank].clone();
        let mut b_cur = b_skewed[rank].clone();
        let mut c_cur = c_panels[rank].clone();
        let mut stacks = StackStats::default();
        for step in 0..side {
            let pending = if step + 1 < side {
                let right = ctx.irecv(grid.rank_of(r, (c + 1) % side), 2 * step as u64);
                let below = ctx.irecv(grid.rank_of((r + 1) % side, c), 2 * step as u64 + 1);
                ctx.isend(
                    grid.rank_of(r, (c + side - 1) % side),
                    2 * step as u64,
                    a_cur.clone(),
                )?;
                ctx.isend(
                    grid.rank_of((r + side - 1) % side, c),
                    2 * step as u64 + 1,
                    b_cur.clone(),
                )?;
                Some((right, below))
            } else {
                None
            };
            stacks.merge(&local_multiply(&a_cur, &b_cur, &mut c_cur, cfg)?);
            if let Some((right, below)) = pending {
                a_cur = ctx.wait(right)?;
                b_cur = ctx.wait(below)?;
            }
        }
        Ok((c_cur, stacks))
    })?;

    let mut c_out = Vec::with_capacity(results.len());
    let mut stacks = StackStats::default();
    for (panel, st) in results {
        c_out.push(panel);
        stacks.merge(&st);
    }
    Ok(MultiplyOutcome {
        c_panels: c_out,
        comm: CommReport::new(side, stats),
        stacks,
    })
}
