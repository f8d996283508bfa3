//! Densification: coalescing a panel's blocks into per-thread dense blocks
//! before multiplying, and decomposing the result back afterwards.
//!
//! An A-side plan splits the panel's block rows into `threads` contiguous
//! groups (the last group absorbs any remainder) and coalesces all columns,
//! giving one tall block per worker. A B-side plan coalesces the whole
//! panel into a single block. The C result of a densified multiplication
//! has A-side structure over C's partition.
//!
//! Densified buffers come from a [`MemoryPool`] so repeated multiplications
//! reuse arenas instead of reallocating.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::{BlockDims, BlockedMatrix};
use crate::pool::MemoryPool;

/// Which side of the product a plan coalesces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Role {
    /// Row groups per thread, columns coalesced. Also the structure of a
    /// densified C, built over C's partition.
    A,
    /// Single coalesced block.
    B,
}

/// Offset maps between a panel's block structure and its densified form.
#[derive(Debug, Clone)]
pub struct DensifyPlan {
    role: Role,
    threads: usize,
    original: BlockDims,
    dense: BlockDims,
    /// original block row -> densified block row
    row_group_of: Vec<usize>,
    /// element row offset of an original block row inside its group
    row_elem_offset: Vec<usize>,
}

impl DensifyPlan {
    pub fn new(original: &BlockDims, threads: usize, role: Role) -> Result<Self> {
        if threads == 0 {
            return Err(Error::PlanMismatch("thread count must be positive".into()));
        }
        let blocks = original.block_rows();
        let groups = match role {
            Role::A => threads.min(blocks),
            Role::B => 1.min(blocks),
        };
        let width = original.ncols();

        let mut row_group_of = Vec::with_capacity(blocks);
        let mut row_elem_offset = Vec::with_capacity(blocks);
        let mut dense_rows = Vec::with_capacity(groups);
        if groups > 0 {
            // Contiguous chunks of floor(blocks / groups); the last group
            // absorbs the remainder.
            let chunk = blocks / groups;
            let mut start = 0;
            for g in 0..groups {
                let end = if g + 1 == groups { blocks } else { start + chunk };
                let mut height = 0;
                for li in start..end {
                    row_group_of.push(g);
                    row_elem_offset.push(height);
                    height += original.row_size(li);
                }
                dense_rows.push(height);
                start = end;
            }
        }
        let dense_cols = if width > 0 { vec![width] } else { vec![] };
        let dense = if dense_rows.is_empty() || dense_cols.is_empty() {
            BlockDims::new(vec![], vec![])?
        } else {
            BlockDims::new(dense_rows, dense_cols)?
        };
        Ok(Self {
            role,
            threads,
            original: original.clone(),
            dense,
            row_group_of,
            row_elem_offset,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn original_dims(&self) -> &BlockDims {
        &self.original
    }

    /// Block partition of the densified panel.
    pub fn dense_dims(&self) -> &BlockDims {
        &self.dense
    }

    /// Bytes moved by one densify (or undensify) pass over a full panel.
    pub fn copy_bytes(&self) -> u64 {
        (self.original.nrows() * self.original.ncols() * std::mem::size_of::<f64>()) as u64
    }

    pub fn summary(&self) -> PlanSummary {
        PlanSummary {
            role: self.role,
            threads: self.threads,
            dense_block_rows: self.dense.row_sizes().to_vec(),
            dense_block_cols: self.dense.col_sizes().to_vec(),
            copy_bytes: self.copy_bytes(),
        }
    }
}

/// Plan digest for run reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanSummary {
    pub role: Role,
    pub threads: usize,
    pub dense_block_rows: Vec<usize>,
    pub dense_block_cols: Vec<usize>,
    pub copy_bytes: u64,
}

/// Dense-block threshold rule; the default threshold of 1.0 densifies only
/// exactly dense panels.
pub fn should_densify(occupancy: f64, threshold: f64) -> bool {
    occupancy >= threshold
}

/// Coalesces `panel` into its densified form. Absent blocks materialize as
/// zeros; stored elements keep their panel positions, so `to_dense` of
/// input and output agree exactly.
pub fn densify(
    panel: &BlockedMatrix,
    plan: &DensifyPlan,
    pool: &mut MemoryPool,
) -> Result<BlockedMatrix> {
    if panel.dims() != &plan.original {
        return Err(Error::PlanMismatch(
            "panel partition differs from the plan's original partition".into(),
        ));
    }
    let width = plan.original.ncols();
    let arena = pool.take(plan.original.nrows() * width);
    let mut out = BlockedMatrix::from_full_arena(plan.dense.clone(), arena)?;
    let dst = out.arena_mut();
    for li in 0..panel.block_rows() {
        let group = plan.row_group_of[li];
        // blocks span the full coalesced width, so a group's arena offset
        // is its element-row offset times the width
        let group_off = plan.dense.row_offset(group) * width;
        let row_off = plan.row_elem_offset[li];
        let h = plan.original.row_size(li);
        for (lj, slot) in panel.row_blocks(li) {
            let col_off = plan.original.col_offset(lj);
            let w = plan.original.col_size(lj);
            let blk = panel.block(slot);
            for r in 0..h {
                let d = group_off + (row_off + r) * width + col_off;
                dst[d..d + w].copy_from_slice(&blk[r * w..(r + 1) * w]);
            }
        }
    }
    Ok(out)
}

/// Decomposes a densified matrix back to the plan's original block sizes.
/// Every original block is materialized explicitly, zeros included.
pub fn undensify(dense: &BlockedMatrix, plan: &DensifyPlan) -> Result<BlockedMatrix> {
    if dense.dims() != &plan.dense {
        return Err(Error::PlanMismatch(
            "matrix partition differs from the plan's densified partition".into(),
        ));
    }
    let width = plan.original.ncols();
    // Densified blocks span the full width in group order, so the dense
    // expansion is already the panel in row-major order.
    let arena = dense.to_dense();

    let mut entries = Vec::with_capacity(plan.original.block_rows() * plan.original.block_cols());
    for li in 0..plan.original.block_rows() {
        let h = plan.original.row_size(li);
        let top = plan.original.row_offset(li);
        for lj in 0..plan.original.block_cols() {
            let w = plan.original.col_size(lj);
            let left = plan.original.col_offset(lj);
            let mut buf = Vec::with_capacity(h * w);
            for r in 0..h {
                let s = (top + r) * width + left;
                buf.extend_from_slice(&arena[s..s + w]);
            }
            entries.push((li, lj, buf));
        }
    }
    BlockedMatrix::build(plan.original.clone(), entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::{generate_stacks, local_multiply, traversal_order, LocalConfig};
    use rand::{Rng, SeedableRng};

    fn rand_blocked(dims: BlockDims, seed: u64) -> BlockedMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..dims.nrows() * dims.ncols())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        BlockedMatrix::from_dense(&data, dims, false).unwrap()
    }

    #[test]
    fn paper_scale_densified_dims() {
        // Panel of one rank on a 4x4 grid for a 63,360-square matrix with
        // block size 22: 720x720 local blocks. With t = 3 the A thread
        // blocks are 5,280 x 15,840 and the B block is 15,840 x 15,840.
        let panel = BlockDims::uniform(22, 720, 720).unwrap();
        let a = DensifyPlan::new(&panel, 3, Role::A).unwrap();
        assert_eq!(a.dense_dims().row_sizes(), &[5280, 5280, 5280]);
        assert_eq!(a.dense_dims().col_sizes(), &[15840]);
        let b = DensifyPlan::new(&panel, 3, Role::B).unwrap();
        assert_eq!(b.dense_dims().row_sizes(), &[15840]);
        assert_eq!(b.dense_dims().col_sizes(), &[15840]);
    }

    #[test]
    fn already_dense_panel_is_identity() {
        let dims = BlockDims::new(vec![4], vec![5]).unwrap();
        let m = rand_blocked(dims.clone(), 1);
        let plan = DensifyPlan::new(&dims, 1, Role::B).unwrap();
        let mut pool = MemoryPool::new();
        let d = densify(&m, &plan, &mut pool).unwrap();
        assert_eq!(d.to_dense(), m.to_dense());
        assert_eq!(d.nnz_blocks(), 1);
    }

    #[test]
    fn missing_block_becomes_zeros_and_returns_explicit() {
        let dims = BlockDims::uniform(2, 2, 2).unwrap();
        let m = BlockedMatrix::build(
            dims.clone(),
            vec![
                (0, 0, vec![1.0, 2.0, 3.0, 4.0]),
                (1, 0, vec![5.0, 6.0, 7.0, 8.0]),
                (1, 1, vec![9.0, 1.0, 2.0, 3.0]),
            ],
        )
        .unwrap();
        let plan = DensifyPlan::new(&dims, 2, Role::A).unwrap();
        let mut pool = MemoryPool::new();
        let d = densify(&m, &plan, &mut pool).unwrap();
        // element positions preserved, hole filled with zeros
        assert_eq!(d.to_dense(), m.to_dense());
        let back = undensify(&d, &plan).unwrap();
        assert_eq!(back.nnz_blocks(), 4, "zero block restored explicitly");
        let z = back.find_block(0, 1).unwrap();
        assert!(back.block(z).iter().all(|&x| x == 0.0));
        assert_eq!(back.to_dense(), m.to_dense());
    }

    #[test]
    fn roundtrip_bit_identical_on_full_panels() {
        let dims = BlockDims::new(vec![3, 1, 2, 2], vec![2, 4, 1]).unwrap();
        let m = rand_blocked(dims.clone(), 7);
        let mut pool = MemoryPool::new();
        for (threads, role) in [(1, Role::B), (2, Role::A), (3, Role::A), (7, Role::A)] {
            let plan = DensifyPlan::new(&dims, threads, role).unwrap();
            let d = densify(&m, &plan, &mut pool).unwrap();
            assert_eq!(d.to_dense(), m.to_dense());
            let back = undensify(&d, &plan).unwrap();
            assert_eq!(back, m, "threads {threads} role {role:?}");
        }
    }

    #[test]
    fn pool_reuse_across_repeats() {
        let dims = BlockDims::uniform(4, 3, 3).unwrap();
        let m = rand_blocked(dims.clone(), 9);
        let plan = DensifyPlan::new(&dims, 2, Role::A).unwrap();
        let mut pool = MemoryPool::new();
        let d1 = densify(&m, &plan, &mut pool).unwrap();
        pool.put(d1.into_arena());
        let _d2 = densify(&m, &plan, &mut pool).unwrap();
        assert_eq!(pool.stats().fresh_allocs, 1);
        assert_eq!(pool.stats().reuses, 1);
    }

    #[test]
    fn threshold_rule() {
        assert!(should_densify(1.0, 1.0));
        assert!(!should_densify(0.0, 1.0));
        assert!(should_densify(0.9, 0.8));
        assert!(!should_densify(0.79, 0.8));
    }

    #[test]
    fn densified_generation_has_batch_size_one() {
        let t = 3;
        let adims = BlockDims::uniform(2, 6, 4).unwrap();
        let bdims = BlockDims::uniform(2, 4, 4).unwrap();
        let a = rand_blocked(adims.clone(), 11);
        let b = rand_blocked(bdims.clone(), 12);
        let mut pool = MemoryPool::new();
        let pa = DensifyPlan::new(&adims, t, Role::A).unwrap();
        let pb = DensifyPlan::new(&bdims, t, Role::B).unwrap();
        let da = densify(&a, &pa, &mut pool).unwrap();
        let db = densify(&b, &pb, &mut pool).unwrap();
        let cdims = BlockDims::product(da.dims(), db.dims()).unwrap();
        let mut c = BlockedMatrix::empty(cdims);
        let order = traversal_order(da.block_rows(), db.block_cols());
        c.ensure_blocks(&order).unwrap();
        let stacks = generate_stacks(&da, &db, &c, &order, 30_000).unwrap();
        assert_eq!(stacks.len(), t);
        assert!(stacks.iter().all(|s| s.entries.len() == 1));
    }

    #[test]
    fn densified_multiply_agrees_with_blocked() {
        let t = 2;
        let adims = BlockDims::new(vec![2, 3, 1], vec![2, 2]).unwrap();
        let bdims = BlockDims::new(vec![2, 2], vec![3, 1, 2]).unwrap();
        let a = rand_blocked(adims.clone(), 21);
        let b = rand_blocked(bdims.clone(), 22);

        let mut c_blocked =
            BlockedMatrix::empty(BlockDims::product(a.dims(), b.dims()).unwrap());
        local_multiply(&a, &b, &mut c_blocked, &LocalConfig::with_threads(t)).unwrap();

        let mut pool = MemoryPool::new();
        let pa = DensifyPlan::new(&adims, t, Role::A).unwrap();
        let pb = DensifyPlan::new(&bdims, t, Role::B).unwrap();
        let da = densify(&a, &pa, &mut pool).unwrap();
        let db = densify(&b, &pb, &mut pool).unwrap();
        let cdims = BlockDims::product(a.dims(), b.dims()).unwrap();
        let pc = DensifyPlan::new(&cdims, t, Role::A).unwrap();
        let mut dc = BlockedMatrix::empty(pc.dense_dims().clone());
        local_multiply(&da, &db, &mut dc, &LocalConfig::with_threads(t)).unwrap();
        let c_dense_path = undensify(&dc, &pc).unwrap();

        let got = c_dense_path.to_dense();
        let want = c_blocked.to_dense();
        let worst = got
            .iter()
            .zip(&want)
            .map(|(g, w)| (g - w).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "worst {worst}");
    }

    #[test]
    fn plan_mismatch_rejected() {
        let dims = BlockDims::uniform(2, 2, 2).unwrap();
        let other = BlockDims::uniform(2, 3, 2).unwrap();
        let m = rand_blocked(other, 3);
        let plan = DensifyPlan::new(&dims, 2, Role::A).unwrap();
        let mut pool = MemoryPool::new();
        assert!(matches!(
            densify(&m, &plan, &mut pool),
            Err(Error::PlanMismatch(_))
        ));
    }
}
