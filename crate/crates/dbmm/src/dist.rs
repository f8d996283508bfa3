//! 2D process grid and block-cyclic ownership maps.
//!
//! Rank numbering is row-major: `rank = r * cols + c`. Block `(i, j)` is
//! owned by the rank at grid coordinates `(i mod rows, j mod cols)`, the
//! usual block-cyclic convention.

use crate::error::{Error, Result};
use crate::layout::{BlockDims, BlockedMatrix};

/// Rectangular grid of ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessGrid {
    rows: usize,
    cols: usize,
}

impl ProcessGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch("grid dimensions must be positive".into()));
        }
        Ok(Self { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Total rank count P.
    pub fn size(&self) -> usize {
        self.rows * self.cols
    }

    pub fn rank_of(&self, r: usize, c: usize) -> usize {
        debug_assert!(r < self.rows && c < self.cols);
        r * self.cols + c
    }

    pub fn coords_of(&self, rank: usize) -> (usize, usize) {
        debug_assert!(rank < self.size());
        (rank / self.cols, rank % self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Side length of a square grid, or `NonSquareGrid`.
    pub fn side(&self) -> Result<usize> {
        if self.is_square() {
            Ok(self.rows)
        } else {
            Err(Error::NonSquareGrid(self.rows, self.cols))
        }
    }
}

/// Block-cyclic ownership of a block grid over a process grid.
#[derive(Debug, Clone)]
pub struct BlockCyclicMap {
    grid: ProcessGrid,
    dims: BlockDims,
}

impl BlockCyclicMap {
    pub fn new(grid: ProcessGrid, dims: BlockDims) -> Self {
        Self { grid, dims }
    }

    pub fn grid(&self) -> ProcessGrid {
        self.grid
    }

    pub fn dims(&self) -> &BlockDims {
        &self.dims
    }

    /// Owning rank of block `(i, j)`.
    pub fn owner_of_block(&self, i: usize, j: usize) -> Result<usize> {
        if i >= self.dims.block_rows() || j >= self.dims.block_cols() {
            return Err(Error::IndexOutOfRange(format!(
                "block ({i}, {j}) outside {}x{} block grid",
                self.dims.block_rows(),
                self.dims.block_cols()
            )));
        }
        Ok(self.grid.rank_of(i % self.grid.rows, j % self.grid.cols))
    }

    /// Count of block rows owned by grid row `r`.
    pub fn local_block_rows(&self, r: usize) -> usize {
        let total = self.dims.block_rows();
        (total + self.grid.rows - 1 - r) / self.grid.rows
    }

    /// Count of block cols owned by grid column `c`.
    pub fn local_block_cols(&self, c: usize) -> usize {
        let total = self.dims.block_cols();
        (total + self.grid.cols - 1 - c) / self.grid.cols
    }

    /// Block partition of the panel owned by `rank`.
    pub fn local_dims(&self, rank: usize) -> Result<BlockDims> {
        let (r, c) = self.grid.coords_of(rank);
        let rows: Vec<usize> = (0..self.local_block_rows(r))
            .map(|li| self.dims.row_size(r + li * self.grid.rows))
            .collect();
        let cols: Vec<usize> = (0..self.local_block_cols(c))
            .map(|lj| self.dims.col_size(c + lj * self.grid.cols))
            .collect();
        BlockDims::new(rows, cols)
    }

    /// Global block index of a panel-local block index on `rank`.
    pub fn local_to_global(&self, rank: usize, li: usize, lj: usize) -> (usize, usize) {
        let (r, c) = self.grid.coords_of(rank);
        (r + li * self.grid.rows, c + lj * self.grid.cols)
    }

    /// Panel-local block index of a global block index (on its owner).
    pub fn global_to_local(&self, i: usize, j: usize) -> (usize, usize) {
        (i / self.grid.rows, j / self.grid.cols)
    }
}

/// Splits a global matrix into one panel per rank, each re-indexed into
/// panel-local block coordinates.
pub fn scatter(global: &BlockedMatrix, map: &BlockCyclicMap) -> Result<Vec<BlockedMatrix>> {
    if global.dims() != map.dims() {
        return Err(Error::ShapeMismatch(
            "matrix partition differs from the map's partition".into(),
        ));
    }
    let p = map.grid().size();
    let mut per_rank: Vec<Vec<(usize, usize, Vec<f64>)>> = vec![Vec::new(); p];
    for i in 0..global.block_rows() {
        for (j, slot) in global.row_blocks(i) {
            let rank = map.owner_of_block(i, j)?;
            let (li, lj) = map.global_to_local(i, j);
            per_rank[rank].push((li, lj, global.block(slot).to_vec()));
        }
    }
    per_rank
        .into_iter()
        .enumerate()
        .map(|(rank, entries)| BlockedMatrix::build(map.local_dims(rank)?, entries))
        .collect()
}

/// Reassembles panels into the global matrix; exact inverse of [`scatter`].
pub fn gather(panels: &[BlockedMatrix], map: &BlockCyclicMap) -> Result<BlockedMatrix> {
    let p = map.grid().size();
    if panels.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "{} panels for a grid of {p} ranks",
            panels.len()
        )));
    }
    let mut entries = Vec::new();
    for (rank, panel) in panels.iter().enumerate() {
        let local = map.local_dims(rank)?;
        if panel.dims() != &local {
            return Err(Error::OwnershipViolation(format!(
                "panel of rank {rank} has a partition the map does not assign to it"
            )));
        }
        for li in 0..panel.block_rows() {
            for (lj, slot) in panel.row_blocks(li) {
                let (i, j) = map.local_to_global(rank, li, lj);
                entries.push((i, j, panel.block(slot).to_vec()));
            }
        }
    }
    BlockedMatrix::build(map.dims().clone(), entries)
}
