//! Inner-product spaces, basis matrices and orthonormalization.
//!
//! All norms and projections in the library are taken with respect to an SPD
//! matrix G; for finite element discretizations G is the mass matrix, so
//! `‖x‖ = sqrt(xᵀGx)` is the L² norm of the represented function.

use nalgebra::{DMatrix, DVector};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::linalg::csr::CsrMatrix;
use crate::linalg::factor::SparseFactor;

/// Which matrix the columns of a [`BasisMatrix`] are orthonormal under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricTag {
    /// Orthonormal in the G inner product of the ambient space.
    Gram,
    /// Orthonormal/biorthogonal with respect to the mass matrix E.
    Mass,
    /// No orthogonality is claimed.
    None,
}

/// ℝⁿ equipped with an SPD Gram matrix G.
pub struct InnerProductSpace {
    dim: usize,
    gram: CsrMatrix,
    factor: OnceLock<SparseFactor>,
}

impl InnerProductSpace {
    pub fn new(gram: CsrMatrix) -> Result<Self> {
        if gram.rows() != gram.cols() {
            return Err(Error::DimensionMismatch {
                context: "InnerProductSpace::new (square Gram matrix)",
                expected: gram.rows(),
                found: gram.cols(),
            });
        }
        Ok(InnerProductSpace {
            dim: gram.rows(),
            gram,
            factor: OnceLock::new(),
        })
    }

    /// ℝⁿ with the Euclidean inner product.
    pub fn euclidean(n: usize) -> Self {
        InnerProductSpace {
            dim: n,
            gram: CsrMatrix::identity(n),
            factor: OnceLock::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self) -> &CsrMatrix {
        &self.gram
    }

    pub fn g_inner(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        assert_eq!(y.len(), self.dim);
        let gy = self.gram.apply(y);
        x.iter().zip(&gy).map(|(a, b)| a * b).sum()
    }

    /// `sqrt(xᵀGx)`; tiny negative round-off under the root is clamped.
    pub fn g_norm(&self, x: &[f64]) -> f64 {
        self.g_inner(x, x).max(0.0).sqrt()
    }

    /// Solve G y = rhs (Riesz representative of a dual vector).
    pub fn solve_gram(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let f = self.gram_factor()?;
        Ok(f.solve(rhs))
    }

    fn gram_factor(&self) -> Result<&SparseFactor> {
        if let Some(f) = self.factor.get() {
            return Ok(f);
        }
        let f = SparseFactor::new(&self.gram)?;
        let _ = self.factor.set(f);
        Ok(self.factor.get().unwrap())
    }
}

/// Dense column block spanning a reduced subspace of an ambient space.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    ambient_dim: usize,
    columns: DMatrix<f64>,
    metric: MetricTag,
}

impl BasisMatrix {
    pub fn new(columns: DMatrix<f64>, metric: MetricTag) -> Self {
        BasisMatrix {
            ambient_dim: columns.nrows(),
            columns,
            metric,
        }
    }

    pub fn empty(ambient_dim: usize, metric: MetricTag) -> Self {
        BasisMatrix {
            ambient_dim,
            columns: DMatrix::zeros(ambient_dim, 0),
            metric,
        }
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    /// Number of basis vectors.
    pub fn k(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.k() == 0
    }

    pub fn metric(&self) -> MetricTag {
        self.metric
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn column_vec(&self, j: usize) -> Vec<f64> {
        self.columns.column(j).iter().copied().collect()
    }

    /// V · c, lifting reduced coefficients to the ambient space.
    pub fn lift(&self, coeffs: &DVector<f64>) -> Vec<f64> {
        assert_eq!(coeffs.len(), self.k());
        let out = &self.columns * coeffs;
        out.iter().copied().collect()
    }

    /// max |VᵀMV − I| for a given metric matrix, 0 for an empty basis.
    pub fn orthonormality_defect(&self, metric: &CsrMatrix) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mv = metric.mul_dense(&self.columns);
        let gram = self.columns.transpose() * mv;
        let mut defect = 0.0f64;
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((gram[(i, j)] - target).abs());
            }
        }
        defect
    }
}

/// Coefficients `VᵀGx` of the G-orthogonal projection of x onto span(V).
///
/// Refuses bases that do not carry the G-orthonormality tag, since the
/// formula is only a projection for G-orthonormal columns.
pub fn g_project(space: &InnerProductSpace, basis: &BasisMatrix, x: &[f64]) -> Result<DVector<f64>> {
    if basis.metric() != MetricTag::Gram {
        return Err(Error::BasisNotOrthonormal {
            context: "g_project",
        });
    }
    if x.len() != space.dim() {
        return Err(Error::DimensionMismatch {
            context: "g_project",
            expected: space.dim(),
            found: x.len(),
        });
    }
    debug_assert!(basis.orthonormality_defect(space.gram()) < 1e-8);
    let gx = space.gram().apply(x);
    let gx = DVector::from_vec(gx);
    Ok(basis.columns().transpose() * gx)
}

/// Modified Gram–Schmidt with one re-orthogonalization pass.
///
/// Input vectors whose remainder falls below `1e-12 · max input norm` are
/// dropped; an all-null input yields an empty basis. Deterministic in the
/// input order.
pub fn orthonormalize(metric: &CsrMatrix, vectors: &[Vec<f64>], tag: MetricTag) -> BasisMatrix {
    let n = metric.rows();
    if vectors.is_empty() {
        return BasisMatrix::empty(n, tag);
    }
    let m_inner = |x: &[f64], y: &[f64]| -> f64 {
        let my = metric.apply(y);
        x.iter().zip(&my).map(|(a, b)| a * b).sum()
    };
    let max_norm = vectors
        .iter()
        .map(|v| m_inner(v, v).max(0.0).sqrt())
        .fold(0.0f64, f64::max);
    if max_norm == 0.0 {
        return BasisMatrix::empty(n, tag);
    }
    let drop_tol = 1e-12 * max_norm;
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        assert_eq!(v.len(), n, "orthonormalize: dimension mismatch");
        let mut w = v.clone();
        for _pass in 0..2 {
            for b in &kept {
                let c = m_inner(&w, b);
                for i in 0..n {
                    w[i] -= c * b[i];
                }
            }
        }
        let nw = m_inner(&w, &w).max(0.0).sqrt();
        if nw > drop_tol {
            for x in &mut w {
                *x /= nw;
            }
            kept.push(w);
        }
    }
    let mut columns = DMatrix::zeros(n, kept.len());
    for (j, b) in kept.iter().enumerate() {
        for i in 0..n {
            columns[(i, j)] = b[i];
        }
    }
    BasisMatrix::new(columns, tag)
}

/// Append new vectors to an existing orthonormal basis, G-orthogonalizing
/// them against it. Returns the extended basis and how many vectors were
/// accepted; vectors whose post-orthogonalization norm falls below
/// `reject_tol · original norm` are rejected.
pub fn extend_orthonormal(
    metric: &CsrMatrix,
    basis: &BasisMatrix,
    new_vectors: &[Vec<f64>],
    reject_tol: f64,
) -> (BasisMatrix, usize) {
    let n = metric.rows();
    let m_inner = |x: &[f64], y: &[f64]| -> f64 {
        let my = metric.apply(y);
        x.iter().zip(&my).map(|(a, b)| a * b).sum()
    };
    let mut kept: Vec<Vec<f64>> = (0..basis.k()).map(|j| basis.column_vec(j)).collect();
    let mut accepted = 0;
    for v in new_vectors {
        let orig = m_inner(v, v).max(0.0).sqrt();
        if orig == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _pass in 0..2 {
            for b in &kept {
                let c = m_inner(&w, b);
                for i in 0..n {
                    w[i] -= c * b[i];
                }
            }
        }
        let nw = m_inner(&w, &w).max(0.0).sqrt();
        if nw > reject_tol * orig {
            for x in &mut w {
                *x /= nw;
            }
            kept.push(w);
            accepted += 1;
        }
    }
    let mut columns = DMatrix::zeros(n, kept.len());
    for (j, b) in kept.iter().enumerate() {
        for i in 0..n {
            columns[(i, j)] = b[i];
        }
    }
    (BasisMatrix::new(columns, basis.metric()), accepted)
}
