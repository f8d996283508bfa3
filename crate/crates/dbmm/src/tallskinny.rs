//! Reduced-communication multiplication for products with one large
//! dimension: 1D decomposition of K, local partial products, and a
//! rank-ascending binary-tree reduction of the small M x N result.
//!
//! Each rank contributes its partial C at most once, so per-rank sent
//! volume in the reduction is bounded by `M * N * 8` bytes no matter how
//! many ranks participate. Received volume at the tree root grows with
//! log2(P).

use crate::dist::ProcessGrid;
use crate::error::{Error, Result};
use crate::layout::{BlockDims, BlockedMatrix};
use crate::local::{local_multiply, LocalConfig, StackStats};
use crate::report::CommReport;
use crate::transport::{spmd_run_with, TransportConfig};

use crate::cannon::MultiplyOutcome;

/// Contiguous 1D decomposition of the K block dimension over P ranks.
#[derive(Debug, Clone)]
pub struct KBlockMap {
    boundaries: Vec<usize>,
}

impl KBlockMap {
    /// Balanced contiguous ranges; the first `k_blocks mod ranks` ranks
    /// take one extra block.
    pub fn balanced(k_blocks: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 {
            return Err(Error::ShapeMismatch("rank count must be positive".into()));
        }
        let base = k_blocks / ranks;
        let extra = k_blocks % ranks;
        let mut boundaries = Vec::with_capacity(ranks + 1);
        let mut at = 0;
        boundaries.push(0);
        for rank in 0..ranks {
            at += base + usize::from(rank < extra);
            boundaries.push(at);
        }
        Ok(Self { boundaries })
    }

    pub fn ranks(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// K block range owned by `rank`.
    pub fn range(&self, rank: usize) -> std::ops::Range<usize> {
        self.boundaries[rank]..self.boundaries[rank + 1]
    }

    pub fn owner(&self, k_block: usize) -> Result<usize> {
        if k_block >= *self.boundaries.last().unwrap() {
            return Err(Error::IndexOutOfRange(format!(
                "k block {k_block} outside the map"
            )));
        }
        Ok(self.boundaries.partition_point(|&b| b <= k_block) - 1)
    }
}

/// Where the reduced C ends up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    /// Rank 0 holds C; other panels come back empty.
    RootOnly,
    /// Every rank holds C (tree broadcast after the reduce).
    Replicate,
}

/// Options for [`tall_skinny_multiply`].
#[derive(Debug, Clone)]
pub struct TallSkinnyOptions {
    pub mode: ReduceMode,
    /// Largest M x N element count a single rank is allowed to hold.
    pub result_budget: usize,
}

impl Default for TallSkinnyOptions {
    fn default() -> Self {
        Self {
            mode: ReduceMode::RootOnly,
            result_budget: 1 << 27, // 1 GiB of f64
        }
    }
}

/// Slices global A (M x K) by block columns and B (K x N) by block rows
/// into the per-rank operands of the 1D decomposition.
pub fn slice_operands(
    a: &BlockedMatrix,
    b: &BlockedMatrix,
    kmap: &KBlockMap,
) -> Result<(Vec<BlockedMatrix>, Vec<BlockedMatrix>)> {
    if a.dims().col_sizes() != b.dims().row_sizes() {
        return Err(Error::PartitionMismatch(
            "K partition of A columns differs from B rows".into(),
        ));
    }
    if *kmap.boundaries.last().unwrap() != a.block_cols() {
        return Err(Error::PartitionMismatch(format!(
            "K map covers {} blocks, operands have {}",
            kmap.boundaries.last().unwrap(),
            a.block_cols()
        )));
    }
    let mut a_slices = Vec::with_capacity(kmap.ranks());
    let mut b_slices = Vec::with_capacity(kmap.ranks());
    for rank in 0..kmap.ranks() {
        let range = kmap.range(rank);
        a_slices.push(a.block_col_slice(range.clone())?);
        b_slices.push(b.block_row_slice(range)?);
    }
    Ok((a_slices, b_slices))
}

/// `C = sum over ranks of A_local * B_local` via a binary-tree reduce.
///
/// Summation order is the fixed rank-ascending tree, so results are
/// bit-reproducible for a given P; across different P the reassociation
/// stays within the verification tolerance.
pub fn tall_skinny_multiply(
    a_slices: &[BlockedMatrix],
    b_slices: &[BlockedMatrix],
    grid: ProcessGrid,
    cfg: &LocalConfig,
    opts: &TallSkinnyOptions,
) -> Result<MultiplyOutcome> {
    tall_skinny_multiply_with(a_slices, b_slices, grid, cfg, opts, &TransportConfig::default())
}

/// [`tall_skinny_multiply`] with explicit transport configuration.
pub fn tall_skinny_multiply_with(
    a_slices: &[BlockedMatrix],
    b_slices: &[BlockedMatrix],
    grid: ProcessGrid,
    cfg: &LocalConfig,
    opts: &TallSkinnyOptions,
    transport: &TransportConfig,
) -> Result<MultiplyOutcome> {
    let p = grid.size();
    if a_slices.len() != p || b_slices.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "({}, {}) K slices for {p} ranks",
            a_slices.len(),
            b_slices.len()
        )));
    }
    let row_dims = a_slices[0].dims().row_sizes();
    let col_dims = b_slices[0].dims().col_sizes();
    for rank in 0..p {
        if a_slices[rank].dims().col_sizes() != b_slices[rank].dims().row_sizes() {
            return Err(Error::PartitionMismatch(format!(
                "rank {rank}: K partition of A columns differs from B rows"
            )));
        }
        if a_slices[rank].dims().row_sizes() != row_dims
            || b_slices[rank].dims().col_sizes() != col_dims
        {
            return Err(Error::PartitionMismatch(format!(
                "rank {rank}: result partition differs across ranks"
            )));
        }
    }
    let c_dims = BlockDims::new(row_dims.to_vec(), col_dims.to_vec())?;
    let result_elems = c_dims.nrows() * c_dims.ncols();
    if result_elems > opts.result_budget {
        return Err(Error::ResultTooLargeForReplication(
            c_dims.nrows(),
            c_dims.ncols(),
            opts.result_budget,
        ));
    }

    let rounds = (p.max(1) as f64).log2().ceil() as usize;
    let mode = opts.mode;
    let (results, stats) = spmd_run_with::<BlockedMatrix, _, _>(&grid, transport, |ctx| {
        let rank = ctx.rank();
        let mut c = BlockedMatrix::empty(c_dims.clone());
        let stacks = local_multiply(&a_slices[rank], &b_slices[rank], &mut c, cfg)?;

        // rank-ascending binary tree: ((c0+c1)+(c2+c3))+...
        let mut gap = 1;
        let mut holds_result = true;
        while gap < p {
            if rank % (2 * gap) == 0 {
                let src = rank + gap;
                if src < p {
                    let h = ctx.irecv(src, gap as u64);
                    let other = ctx.wait(h)?;
                    c.add_assign_union(&other)?;
                }
            } else if rank % (2 * gap) == gap {
                ctx.isend(rank - gap, gap as u64, c.clone())?;
                holds_result = false;
                break;
            }
            gap *= 2;
        }

        match mode {
            ReduceMode::RootOnly => {
                if rank == 0 {
                    Ok((c, stacks))
                } else {
                    Ok((BlockedMatrix::empty(c_dims.clone()), stacks))
                }
            }
            ReduceMode::Replicate => {
                // inverse tree: parents feed the ranks that fed them
                let mut gap = 1usize;
                while gap * 2 < p {
                    gap *= 2;
                }
                if !holds_result {
                    let mut my_gap = 1;
                    while rank % (2 * my_gap) != my_gap {
                        my_gap *= 2;
                    }
                    let h = ctx.irecv(rank - my_gap, u64::MAX - my_gap as u64);
                    c = ctx.wait(h)?;
                    // forward downwards from my own position
                    let mut g = my_gap / 2;
                    while g >= 1 {
                        if rank + g < p {
                            ctx.isend(rank + g, u64::MAX - g as u64, c.clone())?;
                        }
                        if g == 1 {
                            break;
                        }
                        g /= 2;
                    }
                } else if rank == 0 {
                    let mut g = gap;
                    while g >= 1 {
                        if g < p {
                            ctx.isend(g, u64::MAX - g as u64, c.clone())?;
                        }
                        if g == 1 {
                            break;
                        }
                        g /= 2;
                    }
                }
                Ok((c, stacks))
            }
        }
    })?;

    let mut c_out = Vec::with_capacity(results.len());
    let mut stacks = StackStats::default();
    for (panel, st) in results {
        c_out.push(panel);
        stacks.merge(&st);
    }
    Ok(MultiplyOutcome {
        c_panels: c_out,
        comm: CommReport::new(rounds, stats),
        stacks,
    })
}
