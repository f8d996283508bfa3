//! Per-rank multiplication pipeline: traversal ordering, capped batch
//! generation, static scheduling by A row-block, and execution through the
//! block kernels.
//!
//! Batches ("stacks") never mix A row-blocks and never exceed the cap.
//! Scheduling is the pure function `row_block mod workers`, so the map from
//! C row-block to worker is single-valued and workers write disjoint C
//! regions without locks. Within a worker, stacks run in generation order,
//! which makes results bit-identical for every worker count.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{self, KernelChoice};
use crate::layout::BlockedMatrix;

/// Batch cap quoted by the scheduler design: at most this many block
/// multiplications per stack.
pub const DEFAULT_STACK_CAP: usize = 30_000;

/// Per-rank execution knobs.
#[derive(Debug, Clone)]
pub struct LocalConfig {
    /// Worker count t for stack execution.
    pub threads: usize,
    /// Stack capacity; exposed for experiments, default 30,000.
    pub stack_cap: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            threads: 1,
            stack_cap: DEFAULT_STACK_CAP,
        }
    }
}

impl LocalConfig {
    pub fn with_threads(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }
}

/// One block-triple multiplication: arena offsets plus block dims.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StackEntry {
    pub a_off: usize,
    pub b_off: usize,
    pub c_off: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// A batch of multiplications sharing one A row-block.
#[derive(Debug, Clone)]
pub struct Stack {
    pub entries: Vec<StackEntry>,
    pub a_row_block: usize,
    /// Assigned worker; set by [`schedule`].
    pub worker: usize,
}

/// Order in which (A row-block, B col-block) pairs are processed.
///
/// Recursive bisection restricted so each row-block's pairs stay contiguous
/// (the outer loop runs over A row-blocks): rows split to exhaustion before
/// columns. Under that restriction the interleaved Z-order collapses to
/// ascending columns within each row, since the Z-code is monotone in the
/// column for a fixed row.
pub fn traversal_order(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    fn rec(r0: usize, r1: usize, c0: usize, c1: usize, out: &mut Vec<(usize, usize)>) {
        if r1 - r0 == 0 || c1 - c0 == 0 {
            return;
        }
        if r1 - r0 > 1 {
            let mid = r0 + (r1 - r0) / 2;
            rec(r0, mid, c0, c1, out);
            rec(mid, r1, c0, c1, out);
        } else if c1 - c0 > 1 {
            let mid = c0 + (c1 - c0) / 2;
            rec(r0, r1, c0, mid, out);
            rec(r0, r1, mid, c1, out);
        } else {
            out.push((r0, c0));
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    rec(0, rows, 0, cols, &mut out);
    out
}

/// Builds capped stacks over every structural (a-block, b-block) pair with
/// a matching inner block index, in traversal order. `c` must already hold
/// a block for every pair that receives contributions.
pub fn generate_stacks(
    a: &BlockedMatrix,
    b: &BlockedMatrix,
    c: &BlockedMatrix,
    order: &[(usize, usize)],
    cap: usize,
) -> Result<Vec<Stack>> {
    if a.dims().col_sizes() != b.dims().row_sizes() {
        return Err(Error::PartitionMismatch(
            "inner block partition of A columns differs from B rows".into(),
        ));
    }
    let cap = cap.max(1);
    let mut stacks: Vec<Stack> = Vec::new();
    let mut cur: Option<Stack> = None;
    for &(i, j) in order {
        if cur.as_ref().is_some_and(|s| s.a_row_block != i) {
            stacks.extend(cur.take());
        }
        for (kb, a_slot) in a.row_blocks(i) {
            let Some(b_slot) = b.find_block(kb, j) else {
                continue;
            };
            let c_slot = c.find_block(i, j).ok_or_else(|| {
                Error::PartitionMismatch(format!("C lacks a block at ({i}, {j})"))
            })?;
            let entry = StackEntry {
                a_off: a.block_offset(a_slot),
                b_off: b.block_offset(b_slot),
                c_off: c.block_offset(c_slot),
                m: a.dims().row_size(i),
                n: b.dims().col_size(j),
                k: a.dims().col_size(kb),
            };
            let stack = cur.get_or_insert_with(|| Stack {
                entries: Vec::new(),
                a_row_block: i,
                worker: 0,
            });
            stack.entries.push(entry);
            if stack.entries.len() == cap {
                stacks.extend(cur.take());
            }
        }
    }
    stacks.extend(cur.take());
    Ok(stacks)
}

/// Static assignment: stacks of A row-block r go to worker `r mod workers`.
/// Returns stack indices per worker, preserving generation order.
pub fn schedule(stacks: &mut [Stack], workers: usize) -> Vec<Vec<usize>> {
    let workers = workers.max(1);
    let mut assignment = vec![Vec::new(); workers];
    for (idx, stack) in stacks.iter_mut().enumerate() {
        stack.worker = stack.a_row_block % workers;
        assignment[stack.worker].push(idx);
    }
    assignment
}

/// Shared C arena written concurrently at scheduler-guaranteed disjoint
/// block offsets.
struct ArenaWriter {
    ptr: *mut f64,
    len: usize,
}

unsafe impl Send for ArenaWriter {}
unsafe impl Sync for ArenaWriter {}

impl ArenaWriter {
    /// Caller must guarantee no two live slices overlap; the scheduler's
    /// single-valued row-block -> worker map provides that.
    #[allow(clippy::mut_from_ref)]
    unsafe fn slice_mut(&self, off: usize, len: usize) -> &mut [f64] {
        debug_assert!(off + len <= self.len);
        std::slice::from_raw_parts_mut(self.ptr.add(off), len)
    }
}

#[cfg(feature = "parallel")]
fn run_workers<F: Fn(usize) + Sync>(workers: usize, f: F) {
    use rayon::prelude::*;
    (0..workers).into_par_iter().for_each(f);
}

#[cfg(not(feature = "parallel"))]
fn run_workers<F: Fn(usize) + Sync>(workers: usize, f: F) {
    for w in 0..workers {
        f(w);
    }
}

/// Executes scheduled stacks: `C += A_block * B_block` per entry, workers
/// in parallel, stacks in generation order within each worker.
pub fn execute_stacks(
    stacks: &[Stack],
    assignment: &[Vec<usize>],
    a: &BlockedMatrix,
    b: &BlockedMatrix,
    c: &mut BlockedMatrix,
    kernels: &HashMap<(usize, usize, usize), KernelChoice>,
) -> Result<()> {
    let a_arena = a.arena();
    let b_arena = b.arena();
    for stack in stacks {
        for e in &stack.entries {
            if e.a_off + e.m * e.k > a_arena.len()
                || e.b_off + e.k * e.n > b_arena.len()
                || e.c_off + e.m * e.n > c.arena().len()
            {
                return Err(Error::OffsetOutOfRange(format!(
                    "entry ({}, {}, {}) x ({}, {}, {}) escapes its arena",
                    e.a_off, e.b_off, e.c_off, e.m, e.n, e.k
                )));
            }
        }
    }
    let writer = ArenaWriter {
        ptr: c.arena_mut().as_mut_ptr(),
        len: c.arena().len(),
    };
    run_workers(assignment.len(), |w| {
        for &idx in &assignment[w] {
            let stack = &stacks[idx];
            debug_assert_eq!(stack.worker, w);
            for e in &stack.entries {
                let choice = kernels
                    .get(&(e.m, e.n, e.k))
                    .copied()
                    .unwrap_or_else(|| kernel::dispatch(e.m, e.n, e.k));
                let ablk = &a_arena[e.a_off..e.a_off + e.m * e.k];
                let bblk = &b_arena[e.b_off..e.b_off + e.k * e.n];
                // Disjointness: this worker owns every row-block mapped to w.
                let cblk = unsafe { writer.slice_mut(e.c_off, e.m * e.n) };
                kernel::run_kernel(choice, ablk, bblk, cblk, e.m, e.n, e.k)
                    .expect("offsets validated before execution");
            }
        }
    });
    Ok(())
}

/// Stack shape statistics for reporting.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StackStats {
    pub stacks: u64,
    pub entries: u64,
    pub max_stack_len: u64,
    /// Stacks holding exactly one multiplication (the densified regime).
    pub singleton_stacks: u64,
    /// Stacks per worker, summed over every multiplication phase.
    pub per_worker_stacks: Vec<u64>,
}

impl StackStats {
    pub fn from_stacks(stacks: &[Stack], workers: usize) -> Self {
        let mut per_worker = vec![0u64; workers.max(1)];
        let mut max_len = 0u64;
        let mut singles = 0u64;
        let mut entries = 0u64;
        for s in stacks {
            per_worker[s.worker] += 1;
            entries += s.entries.len() as u64;
            max_len = max_len.max(s.entries.len() as u64);
            if s.entries.len() == 1 {
                singles += 1;
            }
        }
        Self {
            stacks: stacks.len() as u64,
            entries,
            max_stack_len: max_len,
            singleton_stacks: singles,
            per_worker_stacks: per_worker,
        }
    }

    pub fn merge(&mut self, other: &StackStats) {
        self.stacks += other.stacks;
        self.entries += other.entries;
        self.max_stack_len = self.max_stack_len.max(other.max_stack_len);
        self.singleton_stacks += other.singleton_stacks;
        if self.per_worker_stacks.len() < other.per_worker_stacks.len() {
            self.per_worker_stacks
                .resize(other.per_worker_stacks.len(), 0);
        }
        for (dst, src) in self
            .per_worker_stacks
            .iter_mut()
            .zip(&other.per_worker_stacks)
        {
            *dst += src;
        }
    }
}

/// Full per-rank pipeline: `C += A * B` with C structure extended to cover
/// every structural product pair.
pub fn local_multiply(
    a: &BlockedMatrix,
    b: &BlockedMatrix,
    c: &mut BlockedMatrix,
    cfg: &LocalConfig,
) -> Result<StackStats> {
    if a.dims().col_sizes() != b.dims().row_sizes() {
        return Err(Error::PartitionMismatch(
            "inner block partition of A columns differs from B rows".into(),
        ));
    }
    if c.dims().row_sizes() != a.dims().row_sizes() || c.dims().col_sizes() != b.dims().col_sizes()
    {
        return Err(Error::PartitionMismatch(
            "C partition does not match A rows x B cols".into(),
        ));
    }
    let order = traversal_order(a.block_rows(), b.block_cols());
    let mut product_pairs = Vec::new();
    for &(i, j) in &order {
        let has_term = a
            .row_blocks(i)
            .any(|(kb, _)| b.find_block(kb, j).is_some());
        if has_term {
            product_pairs.push((i, j));
        }
    }
    c.ensure_blocks(&product_pairs)?;
    let mut stacks = generate_stacks(a, b, c, &order, cfg.stack_cap)?;
    let assignment = schedule(&mut stacks, cfg.threads);

    let mut kernels = HashMap::new();
    for s in &stacks {
        for e in &s.entries {
            kernels
                .entry((e.m, e.n, e.k))
                .or_insert_with(|| kernel::dispatch(e.m, e.n, e.k));
        }
    }
    execute_stacks(&stacks, &assignment, a, b, c, &kernels)?;
    Ok(StackStats::from_stacks(&stacks, cfg.threads.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::matmul_reference;
    use crate::layout::BlockDims;
    use rand::{Rng, SeedableRng};

    fn rand_blocked(dims: BlockDims, seed: u64) -> BlockedMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..dims.nrows() * dims.ncols())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        BlockedMatrix::from_dense(&data, dims, false).unwrap()
    }

    #[test]
    fn traversal_trivial() {
        assert_eq!(traversal_order(1, 1), vec![(0, 0)]);
        assert!(traversal_order(0, 3).is_empty());
    }

    #[test]
    fn traversal_rows_contiguous() {
        let order = traversal_order(2, 2);
        assert_eq!(order.len(), 4);
        let row1_start = order.iter().position(|&(r, _)| r == 1).unwrap();
        assert!(order[..row1_start].iter().all(|&(r, _)| r == 0));
        assert!(order[row1_start..].iter().all(|&(r, _)| r == 1));
    }

    #[test]
    fn traversal_is_row_contiguous_permutation() {
        let (rows, cols) = (4, 4);
        let order = traversal_order(rows, cols);
        assert_eq!(order.len(), rows * cols);
        let mut seen = vec![false; rows * cols];
        for &(r, c) in &order {
            assert!(!seen[r * cols + c]);
            seen[r * cols + c] = true;
        }
        // every row's pairs form one contiguous run
        for r in 0..rows {
            let idx: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(_, &(rr, _))| rr == r)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(idx.len(), cols);
            assert!(idx.windows(2).all(|w| w[1] == w[0] + 1), "row {r} split");
        }
    }

    #[test]
    fn generation_counts_dense_pairs() {
        let (rb, kb, cb) = (3, 4, 5);
        let a = rand_blocked(BlockDims::uniform(2, rb, kb).unwrap(), 1);
        let b = rand_blocked(BlockDims::uniform(2, kb, cb).unwrap(), 2);
        let mut c = BlockedMatrix::empty(BlockDims::uniform(2, rb, cb).unwrap());
        let order = traversal_order(rb, cb);
        let pairs: Vec<_> = order.clone();
        c.ensure_blocks(&pairs).unwrap();
        let stacks = generate_stacks(&a, &b, &c, &order, DEFAULT_STACK_CAP).unwrap();
        let total: usize = stacks.iter().map(|s| s.entries.len()).sum();
        assert_eq!(total, rb * kb * cb);
        assert_eq!(stacks.len(), rb, "one uncapped stack per row-block");
    }

    #[test]
    fn generation_respects_cap_per_row_block() {
        let (rb, kb, cb) = (2, 3, 4);
        let a = rand_blocked(BlockDims::uniform(1, rb, kb).unwrap(), 3);
        let b = rand_blocked(BlockDims::uniform(1, kb, cb).unwrap(), 4);
        let mut c = BlockedMatrix::empty(BlockDims::uniform(1, rb, cb).unwrap());
        let order = traversal_order(rb, cb);
        c.ensure_blocks(&order).unwrap();
        let cap = 5;
        let stacks = generate_stacks(&a, &b, &c, &order, cap).unwrap();
        assert!(stacks.iter().all(|s| s.entries.len() <= cap));
        for r in 0..rb {
            let per_row = stacks.iter().filter(|s| s.a_row_block == r).count();
            assert_eq!(per_row, (kb * cb + cap - 1) / cap);
        }
    }

    #[test]
    fn generation_empty_a_gives_no_stacks() {
        let a = BlockedMatrix::empty(BlockDims::uniform(2, 3, 3).unwrap());
        let b = rand_blocked(BlockDims::uniform(2, 3, 3).unwrap(), 5);
        let c = BlockedMatrix::empty(BlockDims::uniform(2, 3, 3).unwrap());
        let order = traversal_order(3, 3);
        let stacks = generate_stacks(&a, &b, &c, &order, DEFAULT_STACK_CAP).unwrap();
        assert!(stacks.is_empty());
    }

    #[test]
    fn single_block_panels_make_one_singleton_stack() {
        let a = rand_blocked(BlockDims::new(vec![4], vec![6]).unwrap(), 6);
        let b = rand_blocked(BlockDims::new(vec![6], vec![5]).unwrap(), 7);
        let mut c = BlockedMatrix::empty(BlockDims::new(vec![4], vec![5]).unwrap());
        c.ensure_blocks(&[(0, 0)]).unwrap();
        let stacks =
            generate_stacks(&a, &b, &c, &traversal_order(1, 1), DEFAULT_STACK_CAP).unwrap();
        assert_eq!(stacks.len(), 1);
        assert_eq!(stacks[0].entries.len(), 1);
    }

    #[test]
    fn schedule_is_modular_and_race_free() {
        let mk_stack = |row| Stack {
            entries: Vec::new(),
            a_row_block: row,
            worker: 0,
        };
        let mut stacks: Vec<Stack> = (0..6).map(mk_stack).collect();
        let assignment = schedule(&mut stacks, 3);
        let workers: Vec<usize> = stacks.iter().map(|s| s.worker).collect();
        assert_eq!(workers, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(assignment[0], vec![0, 3]);

        // no two workers share an A row-block
        let mut stacks: Vec<Stack> = [5usize, 2, 5, 0, 2, 7, 5].map(mk_stack).to_vec();
        let assignment = schedule(&mut stacks, 4);
        let mut row_to_worker = HashMap::new();
        for (w, idxs) in assignment.iter().enumerate() {
            for &i in idxs {
                let prev = row_to_worker.insert(stacks[i].a_row_block, w);
                assert!(prev.is_none() || prev == Some(w));
            }
        }
        // purity: assignment depends only on (row, workers)
        assert!(stacks.iter().all(|s| s.worker == s.a_row_block % 4));
    }

    #[test]
    fn execute_identity_copies_b() {
        let dims_a = BlockDims::uniform(2, 1, 1).unwrap();
        let a = BlockedMatrix::build(dims_a, vec![(0, 0, vec![1.0, 0.0, 0.0, 1.0])]).unwrap();
        let b = BlockedMatrix::build(
            BlockDims::uniform(2, 1, 1).unwrap(),
            vec![(0, 0, vec![5.0, 6.0, 7.0, 8.0])],
        )
        .unwrap();
        let mut c = BlockedMatrix::empty(BlockDims::uniform(2, 1, 1).unwrap());
        local_multiply(&a, &b, &mut c, &LocalConfig::default()).unwrap();
        assert_eq!(c.block(0), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn accumulation_over_shared_c_block() {
        // A = [1 2] (two 1x1 blocks), B = [3; 4] -> C = [11]
        let a = BlockedMatrix::build(
            BlockDims::new(vec![1], vec![1, 1]).unwrap(),
            vec![(0, 0, vec![1.0]), (0, 1, vec![2.0])],
        )
        .unwrap();
        let b = BlockedMatrix::build(
            BlockDims::new(vec![1, 1], vec![1]).unwrap(),
            vec![(0, 0, vec![3.0]), (1, 0, vec![4.0])],
        )
        .unwrap();
        let mut c = BlockedMatrix::empty(BlockDims::new(vec![1], vec![1]).unwrap());
        local_multiply(&a, &b, &mut c, &LocalConfig::default()).unwrap();
        assert_eq!(c.block(0), &[11.0]);
    }

    #[test]
    fn thread_count_never_changes_bits() {
        let a = rand_blocked(BlockDims::new(vec![3, 2, 4, 1], vec![2, 3, 2]).unwrap(), 11);
        let b = rand_blocked(BlockDims::new(vec![2, 3, 2], vec![1, 4, 2]).unwrap(), 12);
        let dims_c = BlockDims::new(vec![3, 2, 4, 1], vec![1, 4, 2]).unwrap();
        let mut base = BlockedMatrix::empty(dims_c.clone());
        local_multiply(&a, &b, &mut base, &LocalConfig::with_threads(1)).unwrap();
        for t in 2..=6 {
            let mut c = BlockedMatrix::empty(dims_c.clone());
            local_multiply(&a, &b, &mut c, &LocalConfig::with_threads(t)).unwrap();
            assert_eq!(c, base, "t = {t}");
        }
    }

    #[test]
    fn dense_panels_match_triple_loop_bitwise() {
        // With no absent blocks the entry order reproduces the reference
        // loop's per-element accumulation order exactly.
        let a = rand_blocked(BlockDims::new(vec![4, 2], vec![3, 3, 1]).unwrap(), 21);
        let b = rand_blocked(BlockDims::new(vec![3, 3, 1], vec![2, 5]).unwrap(), 22);
        let mut c = BlockedMatrix::empty(BlockDims::new(vec![4, 2], vec![2, 5]).unwrap());
        local_multiply(&a, &b, &mut c, &LocalConfig::with_threads(3)).unwrap();
        let want = matmul_reference(&a.to_dense(), &b.to_dense(), 6, 7, 7);
        assert_eq!(c.to_dense(), want);
    }

    #[test]
    fn accumulates_into_preloaded_c() {
        let a = rand_blocked(BlockDims::uniform(2, 2, 2).unwrap(), 31);
        let b = rand_blocked(BlockDims::uniform(2, 2, 2).unwrap(), 32);
        let mut c = rand_blocked(BlockDims::uniform(2, 2, 2).unwrap(), 33);
        let c0 = c.to_dense();
        local_multiply(&a, &b, &mut c, &LocalConfig::default()).unwrap();
        let mut want = matmul_reference(&a.to_dense(), &b.to_dense(), 4, 4, 4);
        for (w, z) in want.iter_mut().zip(&c0) {
            *w += z;
        }
        let got = c.to_dense();
        let worst = got
            .iter()
            .zip(&want)
            .map(|(g, w)| (g - w).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1e-12, "worst {worst}");
    }

    #[test]
    fn partition_mismatch_rejected() {
        let a = rand_blocked(BlockDims::uniform(2, 2, 3).unwrap(), 41);
        let b = rand_blocked(BlockDims::uniform(3, 2, 2).unwrap(), 42);
        let mut c = BlockedMatrix::empty(BlockDims::uniform(2, 2, 2).unwrap());
        assert!(matches!(
            local_multiply(&a, &b, &mut c, &LocalConfig::default()),
            Err(Error::PartitionMismatch(_))
        ));
    }
}
