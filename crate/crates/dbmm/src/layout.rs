//! Block partitionings and the blocked compressed-sparse-row matrix container.
//!
//! A [`BlockedMatrix`] stores dense sub-matrix blocks in CSR order over a
//! block grid. Block payloads live in one contiguous arena with a per-block
//! offset table, so coalescing and shipping whole panels is a flat copy.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Row and column block partitions of a matrix.
///
/// `row_sizes[i]` is the element height of block row `i`; offsets are the
/// prefix sums. Every entry is strictly positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockDims {
    row_sizes: Vec<usize>,
    col_sizes: Vec<usize>,
    row_offsets: Vec<usize>,
    col_offsets: Vec<usize>,
}

fn prefix_sums(sizes: &[usize]) -> Vec<usize> {
    let mut offs = Vec::with_capacity(sizes.len() + 1);
    let mut acc = 0;
    offs.push(0);
    for &s in sizes {
        acc += s;
        offs.push(acc);
    }
    offs
}

impl BlockDims {
    pub fn new(row_sizes: Vec<usize>, col_sizes: Vec<usize>) -> Result<Self> {
        if row_sizes.iter().any(|&s| s == 0) || col_sizes.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch(
                "block sizes must be strictly positive".into(),
            ));
        }
        let row_offsets = prefix_sums(&row_sizes);
        let col_offsets = prefix_sums(&col_sizes);
        Ok(Self {
            row_sizes,
            col_sizes,
            row_offsets,
            col_offsets,
        })
    }

    /// Uniform square-block partition: `block_rows` x `block_cols` blocks of
    /// `block` elements per side.
    pub fn uniform(block: usize, block_rows: usize, block_cols: usize) -> Result<Self> {
        Self::new(vec![block; block_rows], vec![block; block_cols])
    }

    /// Covers `total` elements with blocks of `block`, the last block
    /// absorbing any remainder.
    pub fn cover(total: usize, block: usize) -> Result<Vec<usize>> {
        if total == 0 || block == 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot cover {total} elements with block size {block}"
            )));
        }
        let full = total / block;
        let rem = total % block;
        let mut sizes = vec![block; full];
        if rem > 0 {
            if full == 0 {
                sizes.push(rem);
            } else {
                *sizes.last_mut().unwrap() += rem;
            }
        }
        Ok(sizes)
    }

    pub fn block_rows(&self) -> usize {
        self.row_sizes.len()
    }

    pub fn block_cols(&self) -> usize {
        self.col_sizes.len()
    }

    /// Total element rows.
    pub fn nrows(&self) -> usize {
        *self.row_offsets.last().unwrap()
    }

    /// Total element columns.
    pub fn ncols(&self) -> usize {
        *self.col_offsets.last().unwrap()
    }

    pub fn row_size(&self, i: usize) -> usize {
        self.row_sizes[i]
    }

    pub fn col_size(&self, j: usize) -> usize {
        self.col_sizes[j]
    }

    pub fn row_offset(&self, i: usize) -> usize {
        self.row_offsets[i]
    }

    pub fn col_offset(&self, j: usize) -> usize {
        self.col_offsets[j]
    }

    pub fn row_sizes(&self) -> &[usize] {
        &self.row_sizes
    }

    pub fn col_sizes(&self) -> &[usize] {
        &self.col_sizes
    }

    /// Partition for the product of matrices with these row/col partitions.
    pub fn product(a: &BlockDims, b: &BlockDims) -> Result<BlockDims> {
        BlockDims::new(a.row_sizes.clone(), b.col_sizes.clone())
    }
}

/// Blocked-CSR matrix: one panel of a (possibly distributed) matrix.
///
/// Stored blocks are kept in CSR order, row-major inside each block, packed
/// back to back in `elems` with a parallel offset table.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockedMatrix {
    dims: BlockDims,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    block_offsets: Vec<usize>,
    elems: Vec<f64>,
}

impl BlockedMatrix {
    /// Matrix with the given partition and no stored blocks.
    pub fn empty(dims: BlockDims) -> Self {
        let row_ptr = vec![0; dims.block_rows() + 1];
        Self {
            dims,
            row_ptr,
            col_idx: Vec::new(),
            block_offsets: Vec::new(),
            elems: Vec::new(),
        }
    }

    /// Builds a matrix from `(block_row, block_col, row-major elements)`
    /// entries. Entries may arrive in any order; duplicates are rejected.
    pub fn build(dims: BlockDims, mut entries: Vec<(usize, usize, Vec<f64>)>) -> Result<Self> {
        for &(i, j, ref buf) in &entries {
            if i >= dims.block_rows() || j >= dims.block_cols() {
                return Err(Error::IndexOutOfRange(format!(
                    "block ({i}, {j}) outside {}x{} block grid",
                    dims.block_rows(),
                    dims.block_cols()
                )));
            }
            let want = dims.row_size(i) * dims.col_size(j);
            if buf.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "block ({i}, {j}) holds {} elements, partition wants {want}",
                    buf.len()
                )));
            }
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 && w[0].1 == w[1].1 {
                return Err(Error::DuplicateBlock(w[0].0, w[0].1));
            }
        }

        let mut row_ptr = vec![0; dims.block_rows() + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut block_offsets = Vec::with_capacity(entries.len());
        let total: usize = entries.iter().map(|(_, _, b)| b.len()).sum();
        let mut elems = Vec::with_capacity(total);
        for (i, j, buf) in entries {
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            block_offsets.push(elems.len());
            elems.extend_from_slice(&buf);
        }
        for i in 0..dims.block_rows() {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            dims,
            row_ptr,
            col_idx,
            block_offsets,
            elems,
        })
    }

    /// Fully occupied matrix wrapping an arena that already holds every
    /// block back to back in CSR order (row-major inside each block).
    pub fn from_full_arena(dims: BlockDims, arena: Vec<f64>) -> Result<Self> {
        let total = dims.nrows() * dims.ncols();
        if arena.len() != total {
            return Err(Error::ShapeMismatch(format!(
                "arena holds {} elements, partition wants {total}",
                arena.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(dims.block_rows() + 1);
        let mut col_idx = Vec::with_capacity(dims.block_rows() * dims.block_cols());
        let mut block_offsets = Vec::with_capacity(col_idx.capacity());
        row_ptr.push(0);
        let mut off = 0;
        for i in 0..dims.block_rows() {
            for j in 0..dims.block_cols() {
                col_idx.push(j);
                block_offsets.push(off);
                off += dims.row_size(i) * dims.col_size(j);
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            dims,
            row_ptr,
            col_idx,
            block_offsets,
            elems: arena,
        })
    }

    /// Consumes the matrix, yielding its element arena (for buffer reuse).
    pub fn into_arena(self) -> Vec<f64> {
        self.elems
    }

    pub fn dims(&self) -> &BlockDims {
        &self.dims
    }

    pub fn block_rows(&self) -> usize {
        self.dims.block_rows()
    }

    pub fn block_cols(&self) -> usize {
        self.dims.block_cols()
    }

    pub fn nnz_blocks(&self) -> usize {
        self.col_idx.len()
    }

    /// Fraction of block positions holding a stored block. Empty block grids
    /// count as fully occupied.
    pub fn occupancy(&self) -> f64 {
        let cells = self.block_rows() * self.block_cols();
        if cells == 0 {
            1.0
        } else {
            self.nnz_blocks() as f64 / cells as f64
        }
    }

    /// Slot index of block `(i, j)` if stored.
    pub fn find_block(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        self.col_idx[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|pos| lo + pos)
    }

    /// Stored `(block_col, slot)` pairs of one block row.
    pub fn row_blocks(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (lo..hi).map(move |slot| (self.col_idx[slot], slot))
    }

    pub fn block_offset(&self, slot: usize) -> usize {
        self.block_offsets[slot]
    }

    pub fn block_len(&self, slot: usize) -> usize {
        let end = if slot + 1 < self.block_offsets.len() {
            self.block_offsets[slot + 1]
        } else {
            self.elems.len()
        };
        end - self.block_offsets[slot]
    }

    pub fn block(&self, slot: usize) -> &[f64] {
        let off = self.block_offsets[slot];
        &self.elems[off..off + self.block_len(slot)]
    }

    pub fn block_mut(&mut self, slot: usize) -> &mut [f64] {
        let off = self.block_offsets[slot];
        let len = self.block_len(slot);
        &mut self.elems[off..off + len]
    }

    /// Whole element arena, CSR block order.
    pub fn arena(&self) -> &[f64] {
        &self.elems
    }

    pub fn arena_mut(&mut self) -> &mut [f64] {
        &mut self.elems
    }

    /// Zeroes every stored element, keeping the block structure.
    pub fn set_zero(&mut self) {
        self.elems.fill(0.0);
    }

    /// Expands to a dense row-major `nrows x ncols` buffer, absent blocks
    /// reading as zeros.
    pub fn to_dense(&self) -> Vec<f64> {
        let ncols = self.dims.ncols();
        let mut out = vec![0.0; self.dims.nrows() * ncols];
        for i in 0..self.block_rows() {
            let r0 = self.dims.row_offset(i);
            let h = self.dims.row_size(i);
            for (j, slot) in self.row_blocks(i) {
                let c0 = self.dims.col_offset(j);
                let w = self.dims.col_size(j);
                let blk = self.block(slot);
                for r in 0..h {
                    let dst = (r0 + r) * ncols + c0;
                    out[dst..dst + w].copy_from_slice(&blk[r * w..(r + 1) * w]);
                }
            }
        }
        out
    }

    /// Partitions a dense row-major buffer into blocks. Blocks that are
    /// entirely zero are omitted iff `drop_zero_blocks` is set.
    pub fn from_dense(data: &[f64], dims: BlockDims, drop_zero_blocks: bool) -> Result<Self> {
        let (m, n) = (dims.nrows(), dims.ncols());
        if data.len() != m * n {
            return Err(Error::ShapeMismatch(format!(
                "dense buffer holds {} elements, partition wants {m}x{n}",
                data.len()
            )));
        }
        let mut entries = Vec::new();
        for i in 0..dims.block_rows() {
            let r0 = dims.row_offset(i);
            let h = dims.row_size(i);
            for j in 0..dims.block_cols() {
                let c0 = dims.col_offset(j);
                let w = dims.col_size(j);
                let mut buf = Vec::with_capacity(h * w);
                for r in 0..h {
                    let src = (r0 + r) * n + c0;
                    buf.extend_from_slice(&data[src..src + w]);
                }
                if drop_zero_blocks && buf.iter().all(|&x| x == 0.0) {
                    continue;
                }
                entries.push((i, j, buf));
            }
        }
        Self::build(dims, entries)
    }

    /// Stored `(block_row, block_col)` pairs in CSR order.
    pub fn block_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.nnz_blocks());
        for i in 0..self.block_rows() {
            for (j, _) in self.row_blocks(i) {
                out.push((i, j));
            }
        }
        out
    }

    /// Materializes zero blocks for every listed pair not already stored.
    /// Existing payloads are preserved; the arena is rebuilt in CSR order.
    pub fn ensure_blocks(&mut self, pairs: &[(usize, usize)]) -> Result<()> {
        let mut missing: Vec<(usize, usize)> = Vec::new();
        for &(i, j) in pairs {
            if i >= self.block_rows() || j >= self.block_cols() {
                return Err(Error::IndexOutOfRange(format!(
                    "block ({i}, {j}) outside {}x{} block grid",
                    self.block_rows(),
                    self.block_cols()
                )));
            }
            if self.find_block(i, j).is_none() {
                missing.push((i, j));
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        missing.sort_unstable();
        missing.dedup();

        let mut merged: Vec<(usize, usize, Option<usize>)> = Vec::new();
        for i in 0..self.block_rows() {
            for (j, slot) in self.row_blocks(i) {
                merged.push((i, j, Some(slot)));
            }
        }
        for &(i, j) in &missing {
            merged.push((i, j, None));
        }
        merged.sort_by_key(|&(i, j, _)| (i, j));

        let mut row_ptr = vec![0; self.block_rows() + 1];
        let mut col_idx = Vec::with_capacity(merged.len());
        let mut block_offsets = Vec::with_capacity(merged.len());
        let extra: usize = missing
            .iter()
            .map(|&(i, j)| self.dims.row_size(i) * self.dims.col_size(j))
            .sum();
        let mut elems = Vec::with_capacity(self.elems.len() + extra);
        for (i, j, slot) in merged {
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            block_offsets.push(elems.len());
            match slot {
                Some(s) => elems.extend_from_slice(self.block(s)),
                None => elems.resize(elems.len() + self.dims.row_size(i) * self.dims.col_size(j), 0.0),
            }
        }
        for i in 0..self.block_rows() {
            row_ptr[i + 1] += row_ptr[i];
        }
        self.row_ptr = row_ptr;
        self.col_idx = col_idx;
        self.block_offsets = block_offsets;
        self.elems = elems;
        Ok(())
    }

    /// Elementwise `self += other` over the union of the stored structures.
    /// Both matrices must share the same block partition.
    pub fn add_assign_union(&mut self, other: &BlockedMatrix) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::PartitionMismatch(
                "summands have different block partitions".into(),
            ));
        }
        self.ensure_blocks(&other.block_pairs())?;
        for i in 0..other.block_rows() {
            for (j, oslot) in other.row_blocks(i) {
                let slot = self.find_block(i, j).expect("ensured above");
                let off = self.block_offsets[slot];
                let src = other.block(oslot);
                for (d, s) in self.elems[off..off + src.len()].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    /// Copies block rows `range` into a standalone matrix whose block rows
    /// are re-indexed from zero.
    pub fn block_row_slice(&self, range: std::ops::Range<usize>) -> Result<BlockedMatrix> {
        if range.end > self.block_rows() {
            return Err(Error::IndexOutOfRange(format!(
                "block row range {range:?} outside {} rows",
                self.block_rows()
            )));
        }
        let dims = BlockDims::new(
            self.dims.row_sizes[range.clone()].to_vec(),
            self.dims.col_sizes.clone(),
        )?;
        let mut entries = Vec::new();
        for (local, i) in range.enumerate() {
            for (j, slot) in self.row_blocks(i) {
                entries.push((local, j, self.block(slot).to_vec()));
            }
        }
        BlockedMatrix::build(dims, entries)
    }

    /// Copies block columns `range` into a standalone matrix whose block
    /// columns are re-indexed from zero.
    pub fn block_col_slice(&self, range: std::ops::Range<usize>) -> Result<BlockedMatrix> {
        if range.end > self.block_cols() {
            return Err(Error::IndexOutOfRange(format!(
                "block col range {range:?} outside {} cols",
                self.block_cols()
            )));
        }
        let dims = BlockDims::new(
            self.dims.row_sizes.clone(),
            self.dims.col_sizes[range.clone()].to_vec(),
        )?;
        let mut entries = Vec::new();
        for i in 0..self.block_rows() {
            for (j, slot) in self.row_blocks(i) {
                if range.contains(&j) {
                    entries.push((i, j - range.start, self.block(slot).to_vec()));
                }
            }
        }
        BlockedMatrix::build(dims, entries)
    }

    /// Writes the textual fixture format:
    /// `M N row_sizes... ; col_sizes...` header, then one `i j elems...`
    /// line per stored block in CSR order. The encoding round-trips exactly.
    pub fn write_text(&self) -> String {
        let mut out = String::new();
        write!(out, "{} {}", self.dims.nrows(), self.dims.ncols()).unwrap();
        for s in &self.dims.row_sizes {
            write!(out, " {s}").unwrap();
        }
        out.push_str(" ;");
        for s in &self.dims.col_sizes {
            write!(out, " {s}").unwrap();
        }
        out.push('\n');
        for i in 0..self.block_rows() {
            for (j, slot) in self.row_blocks(i) {
                write!(out, "{i} {j}").unwrap();
                for &x in self.block(slot) {
                    write!(out, " {x}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    /// Parses the textual fixture format produced by [`write_text`].
    ///
    /// [`write_text`]: BlockedMatrix::write_text
    pub fn read_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty matrix file".into()))?;
        let mut toks = header.split_whitespace();
        let m: usize = parse_tok(toks.next(), "M")?;
        let n: usize = parse_tok(toks.next(), "N")?;
        let mut row_sizes = Vec::new();
        let mut col_sizes = Vec::new();
        let mut past_sep = false;
        for t in toks {
            if t == ";" {
                past_sep = true;
            } else if past_sep {
                col_sizes.push(parse_tok(Some(t), "col size")?);
            } else {
                row_sizes.push(parse_tok(Some(t), "row size")?);
            }
        }
        if !past_sep {
            return Err(Error::Parse("header missing ';' separator".into()));
        }
        let dims = BlockDims::new(row_sizes, col_sizes)?;
        if dims.nrows() != m || dims.ncols() != n {
            return Err(Error::Parse(format!(
                "header claims {m}x{n} but block sizes sum to {}x{}",
                dims.nrows(),
                dims.ncols()
            )));
        }
        let mut entries = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut toks = line.split_whitespace();
            let i: usize = parse_tok(toks.next(), "block row")?;
            let j: usize = parse_tok(toks.next(), "block col")?;
            let buf: Vec<f64> = toks
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad element {t:?}: {e}")))
                })
                .collect::<Result<_>>()?;
            entries.push((i, j, buf));
        }
        Self::build(dims, entries)
    }
}

fn parse_tok(tok: Option<&str>, what: &str) -> Result<usize> {
    let t = tok.ok_or_else(|| Error::Parse(format!("missing {what}")))?;
    t.parse::<usize>()
        .map_err(|e| Error::Parse(format!("bad {what} {t:?}: {e}")))
}
