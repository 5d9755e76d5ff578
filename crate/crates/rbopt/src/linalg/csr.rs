//! Compressed sparse row matrices.
//!
//! The discrete operators E, A_q, B_q, C, M and the inner product matrix G
//! are all stored in this format. Assembly goes through triplets; duplicate
//! coordinates are summed, which is what finite element assembly needs.

use nalgebra::DMatrix;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Number of sparse matrix-vector products performed so far, across all
/// matrices. Used by tests that assert the online path never touches
/// full-order data.
static APPLY_COUNT: AtomicU64 = AtomicU64::new(0);

/// Global count of sparse `apply`/`apply_transpose` calls.
pub fn sparse_apply_count() -> u64 {
    APPLY_COUNT.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Build from (row, col, value) triplets; duplicates are summed and
    /// explicit zeros kept (deterministic structure for caching).
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut entries: Vec<(usize, usize, f64)> = triplets.to_vec();
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut it = entries.into_iter().peekable();
        while let Some((r, c, mut v)) = it.next() {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            while let Some(&(r2, c2, v2)) = it.peek() {
                if r2 == r && c2 == c {
                    v += v2;
                    it.next();
                } else {
                    break;
                }
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsrMatrix {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let triplets: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        CsrMatrix::from_triplets(n, n, &triplets)
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let triplets: Vec<_> = diag.iter().enumerate().map(|(i, &v)| (i, i, v)).collect();
        CsrMatrix::from_triplets(diag.len(), diag.len(), &triplets)
    }

    pub fn from_dense(m: &DMatrix<f64>, drop_tol: f64) -> Self {
        let mut triplets = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v.abs() > drop_tol {
                    triplets.push((r, c, v));
                }
            }
        }
        CsrMatrix::from_triplets(m.nrows(), m.ncols(), &triplets)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn check_dims(&self, x: &[f64], context: &'static str) -> Result<()> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.cols,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// y = A x.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "apply: dimension mismatch");
        APPLY_COUNT.fetch_add(1, Ordering::Relaxed);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let mut acc = 0.0;
            for idx in self.indptr[r]..self.indptr[r + 1] {
                acc += self.values[idx] * x[self.indices[idx]];
            }
            y[r] = acc;
        }
        y
    }

    /// y = Aᵀ x.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "apply_transpose: dimension mismatch");
        APPLY_COUNT.fetch_add(1, Ordering::Relaxed);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for idx in self.indptr[r]..self.indptr[r + 1] {
                y[self.indices[idx]] += self.values[idx] * xr;
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                triplets.push((self.indices[idx], r, self.values[idx]));
            }
        }
        CsrMatrix::from_triplets(self.cols, self.rows, &triplets)
    }

    /// self + alpha * other, same shape required.
    pub fn add_scaled(&self, other: &CsrMatrix, alpha: f64) -> CsrMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut triplets = Vec::with_capacity(self.nnz() + other.nnz());
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                triplets.push((r, self.indices[idx], self.values[idx]));
            }
            for idx in other.indptr[r]..other.indptr[r + 1] {
                triplets.push((r, other.indices[idx], alpha * other.values[idx]));
            }
        }
        CsrMatrix::from_triplets(self.rows, self.cols, &triplets)
    }

    /// Weighted sum Σ_q coeff_q · M_q of same-shape matrices.
    pub fn weighted_sum(terms: &[(&CsrMatrix, f64)]) -> CsrMatrix {
        assert!(!terms.is_empty());
        let (rows, cols) = (terms[0].0.rows, terms[0].0.cols);
        let mut triplets = Vec::new();
        for (m, w) in terms {
            assert_eq!((m.rows, m.cols), (rows, cols));
            for r in 0..rows {
                for idx in m.indptr[r]..m.indptr[r + 1] {
                    triplets.push((r, m.indices[idx], w * m.values[idx]));
                }
            }
        }
        CsrMatrix::from_triplets(rows, cols, &triplets)
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// A · B for a dense block B (used to compress operators onto bases).
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.cols, b.nrows());
        let mut out = DMatrix::zeros(self.rows, b.ncols());
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                let (c, v) = (self.indices[idx], self.values[idx]);
                for j in 0..b.ncols() {
                    out[(r, j)] += v * b[(c, j)];
                }
            }
        }
        out
    }

    /// Aᵀ · B for a dense block B.
    pub fn mul_transpose_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.rows, b.nrows());
        let mut out = DMatrix::zeros(self.cols, b.ncols());
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                let (c, v) = (self.indices[idx], self.values[idx]);
                for j in 0..b.ncols() {
                    out[(c, j)] += v * b[(r, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[idx])] += self.values[idx];
            }
        }
        m
    }

    /// max |A − Aᵀ| over all coordinates.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let diff = self.add_scaled(&t, -1.0);
        diff.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Drop entries with |value| <= tol (after summing duplicates).
    pub fn pruned(&self, tol: f64) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                if self.values[idx].abs() > tol {
                    triplets.push((r, self.indices[idx], self.values[idx]));
                }
            }
        }
        CsrMatrix::from_triplets(self.rows, self.cols, &triplets)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for idx in self.indptr[r]..self.indptr[r + 1] {
                out.push((r, self.indices[idx], self.values[idx]));
            }
        }
        out
    }
}
