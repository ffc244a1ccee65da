//! Sparse matrices in compressed sparse row form.
//!
//! Holds the normalized interaction structure the graph encoders propagate
//! over. Entries are `(row, col, weight)` with no duplicate coordinates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// Sparse f64 matrix, CSR layout, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMatrix {
    /// Build from an entry list. Entries may arrive in any order; duplicates,
    /// out-of-bounds coordinates, and non-finite weights are rejected.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for &(r, c, w) in entries {
            if r >= rows || c >= cols {
                return Err(CoreError::InvalidArgument(format!(
                    "entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            if !w.is_finite() {
                return Err(CoreError::InvalidArgument(format!(
                    "non-finite weight at ({r}, {c})"
                )));
            }
            sorted.push((r, c, w));
        }
        sorted.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for pair in sorted.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(CoreError::InvalidArgument(format!(
                    "duplicate entry at ({}, {})",
                    pair[0].0, pair[0].1
                )));
            }
        }

        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &sorted {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let col_idx = sorted.iter().map(|e| e.1).collect();
        let weights = sorted.iter().map(|e| e.2).collect();
        Ok(SparseMatrix { rows, cols, row_ptr, col_idx, weights })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// `(col, weight)` pairs of one row.
    #[inline]
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// All `(row, col, weight)` entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, w)| (r, c, w)))
    }

    pub fn transpose(&self) -> SparseMatrix {
        let entries: Vec<(usize, usize, f64)> =
            self.entries().map(|(r, c, w)| (c, r, w)).collect();
        SparseMatrix::from_entries(self.cols, self.rows, &entries)
            .expect("transpose of a valid matrix is valid")
    }

    /// Weight at `(r, c)`, or 0 when absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(col, _)| col == c).map_or(0.0, |(_, w)| w)
    }

    /// Dense materialization, row-major. Test and oracle helper.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.rows * self.cols];
        for (r, c, w) in self.entries() {
            dense[r * self.cols + c] = w;
        }
        dense
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_bounds() {
        let dup = [(0, 0, 1.0), (0, 0, 2.0)];
        assert!(SparseMatrix::from_entries(2, 2, &dup).is_err());
        let oob = [(2, 0, 1.0)];
        assert!(SparseMatrix::from_entries(2, 2, &oob).is_err());
        let inf = [(0, 0, f64::INFINITY)];
        assert!(SparseMatrix::from_entries(2, 2, &inf).is_err());
    }

    #[test]
    fn csr_roundtrip() {
        let entries = [(1, 0, 0.5), (0, 2, 1.5), (1, 2, -2.0)];
        let m = SparseMatrix::from_entries(2, 3, &entries).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(0, 2), 1.5);
        assert_eq!(m.get(1, 0), 0.5);
        assert_eq!(m.get(0, 0), 0.0);
        let collected: Vec<_> = m.entries().collect();
        assert_eq!(collected, vec![(0, 2, 1.5), (1, 0, 0.5), (1, 2, -2.0)]);
    }

    #[test]
    fn transpose_mirrors_entries() {
        let entries = [(0, 1, 2.0), (1, 1, 3.0)];
        let m = SparseMatrix::from_entries(2, 2, &entries).unwrap();
        let t = m.transpose();
        assert_eq!(t.get(1, 0), 2.0);
        assert_eq!(t.get(1, 1), 3.0);
    }
}
