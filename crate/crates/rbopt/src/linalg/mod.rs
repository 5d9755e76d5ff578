//! Inner-product-space linear algebra: sparse operators, Gram-matrix norms
//! and projections, orthonormalization, matrix-free Bi-CGSTAB and cached
//! sparse factorizations.

pub mod csr;
pub mod factor;
pub mod io;
pub mod solve;
pub mod space;

pub use csr::{sparse_apply_count, CsrMatrix};
pub use factor::{param_bits_hash, FactorCache, FactorKey, SparseFactor};
pub use solve::{bicgstab, FnOperator, IterativeSolution, LinearOperator, NonConvergence};
pub use space::{extend_orthonormal, g_project, orthonormalize, BasisMatrix, InnerProductSpace, MetricTag};
