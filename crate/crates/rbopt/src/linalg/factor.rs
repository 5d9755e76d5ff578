//! Sparse LU factorization of step matrices, with an LRU cache.
//!
//! One factorization of `E − dt·A(μ;t_k)` serves both the primal step and,
//! through the transpose solve, the adjoint step at the same time index.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, Mutex, Once};

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};
use crate::linalg::csr::CsrMatrix;

static FAER_SETUP: Once = Once::new();

fn faer_sequential() {
    // Deterministic results across runs regardless of machine parallelism.
    FAER_SETUP.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// LU factorization of a square sparse matrix.
pub struct SparseFactor {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
    n: usize,
}

impl SparseFactor {
    pub fn new(m: &CsrMatrix) -> Result<Self> {
        faer_sequential();
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch {
                context: "SparseFactor::new (square matrix required)",
                expected: m.rows(),
                found: m.cols(),
            });
        }
        let triplets: Vec<Triplet<usize, usize, f64>> = m
            .triplets()
            .into_iter()
            .map(|(r, c, v)| Triplet::new(r, c, v))
            .collect();
        let mat = SparseColMat::try_new_from_triplets(m.rows(), m.cols(), &triplets)
            .map_err(|e| Error::Format(format!("sparse assembly failed: {e:?}")))?;
        let lu = mat.sp_lu().map_err(|_| Error::SingularMatrix {
            context: "sparse LU",
        })?;
        let factor = SparseFactor { lu, n: m.rows() };
        // Zero pivots slip through the numeric phase as inf/nan; probe once.
        let probe = factor.solve(&vec![1.0; m.rows()]);
        if probe.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix {
                context: "sparse LU (zero pivot)",
            });
        }
        Ok(factor)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let rhs = faer::Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve_transpose(&rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }
}

/// Cache key: parameter bit-pattern hash plus time index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactorKey {
    pub param_hash: u64,
    pub time_index: usize,
}

/// Hash of a parameter vector by exact f64 bit patterns.
pub fn param_bits_hash(mu: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in mu {
        v.to_bits().hash(&mut h);
    }
    mu.len().hash(&mut h);
    h.finish()
}

struct CacheInner {
    map: HashMap<FactorKey, (u64, Arc<SparseFactor>)>,
    tick: u64,
}

/// LRU cache of step-matrix factorizations, safe for concurrent use.
pub struct FactorCache {
    inner: Mutex<CacheInner>,
    capacity: usize,
}

impl FactorCache {
    pub fn new(capacity: usize) -> Self {
        FactorCache {
            inner: Mutex::new(CacheInner {
                map: HashMap::new(),
                tick: 0,
            }),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&self) {
        let mut inner = self.inner.lock().unwrap();
        inner.map.clear();
    }

    /// Fetch the factorization for `key`, building it on a miss.
    pub fn get_or_build<F>(&self, key: FactorKey, build: F) -> Result<Arc<SparseFactor>>
    where
        F: FnOnce() -> Result<SparseFactor>,
    {
        {
            let mut inner = self.inner.lock().unwrap();
            inner.tick += 1;
            let tick = inner.tick;
            if let Some(entry) = inner.map.get_mut(&key) {
                entry.0 = tick;
                return Ok(entry.1.clone());
            }
        }
        // Built outside the lock; a racing builder for the same key just
        // produces an identical factor and one of the two is kept.
        let factor = Arc::new(build()?);
        let mut inner = self.inner.lock().unwrap();
        inner.tick += 1;
        let tick = inner.tick;
        if let Some(existing) = inner.map.get(&key) {
            return Ok(existing.1.clone());
        }
        if inner.map.len() >= self.capacity {
            if let Some((&oldest, _)) = inner.map.iter().min_by_key(|(_, (stamp, _))| *stamp) {
                inner.map.remove(&oldest);
            }
        }
        inner.map.insert(key, (tick, factor.clone()));
        Ok(factor)
    }
}
