//! Matrix-free Bi-CGSTAB.

use crate::error::Error;

/// A square linear map given only through its action.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

/// Wrap a closure as a matrix-free operator.
pub struct FnOperator<F: Fn(&[f64]) -> Vec<f64>> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64>> FnOperator<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FnOperator { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> LinearOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

#[derive(Debug, Clone)]
pub struct IterativeSolution {
    pub x: Vec<f64>,
    /// True relative residual ‖op(x) − rhs‖₂ / ‖rhs‖₂ at return.
    pub relative_residual: f64,
    pub iterations: usize,
}

/// Non-convergence report carrying the best iterate seen so far.
#[derive(Debug, Clone)]
pub struct NonConvergence {
    pub best: Vec<f64>,
    pub relative_residual: f64,
    pub iterations: usize,
}

impl NonConvergence {
    pub fn into_error(self) -> Error {
        Error::SolverDidNotConverge {
            relative_residual: self.relative_residual,
            iterations: self.iterations,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Bi-CGSTAB for a square matrix-free operator, starting from x₀ = 0.
///
/// `jacobi` optionally holds the operator diagonal for diagonal
/// preconditioning. On success the returned iterate satisfies
/// ‖op(x) − rhs‖₂ ≤ rel_tol·‖rhs‖₂, verified against the true residual, not
/// the recurrence residual. Breakdown or running out of iterations yields a
/// [`NonConvergence`] report with the best iterate.
pub fn bicgstab(
    op: &dyn LinearOperator,
    rhs: &[f64],
    rel_tol: f64,
    max_iter: usize,
    jacobi: Option<&[f64]>,
) -> std::result::Result<IterativeSolution, NonConvergence> {
    let n = op.dim();
    assert_eq!(rhs.len(), n, "bicgstab: rhs dimension mismatch");
    assert!(rel_tol > 0.0, "bicgstab: rel_tol must be positive");
    let bnorm = norm2(rhs);
    if bnorm == 0.0 {
        return Ok(IterativeSolution {
            x: vec![0.0; n],
            relative_residual: 0.0,
            iterations: 0,
        });
    }
    let precond = |v: &[f64]| -> Vec<f64> {
        match jacobi {
            Some(d) => v.iter().zip(d).map(|(vi, di)| if *di != 0.0 { vi / di } else { *vi }).collect(),
            None => v.to_vec(),
        }
    };

    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = rhs.to_vec();
    let r_hat = r.clone();
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];

    let mut best = x.clone();
    let mut best_res = 1.0f64; // relative; x = 0 gives residual 1

    let true_rel_res = |x: &[f64]| -> f64 {
        let ax = op.apply(x);
        let diff: Vec<f64> = ax.iter().zip(rhs).map(|(a, b)| a - b).collect();
        norm2(&diff) / bnorm
    };

    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < f64::MIN_POSITIVE * 1e4 {
            // breakdown: r orthogonal to the shadow residual
            return Err(NonConvergence {
                best,
                relative_residual: best_res,
                iterations: it - 1,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = precond(&p);
        v = op.apply(&p_hat);
        let rhv = dot(&r_hat, &v);
        if rhv == 0.0 {
            return Err(NonConvergence {
                best,
                relative_residual: best_res,
                iterations: it - 1,
            });
        }
        alpha = rho / rhv;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm2(&s) / bnorm <= rel_tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            let rr = true_rel_res(&x);
            if rr <= rel_tol {
                return Ok(IterativeSolution {
                    x,
                    relative_residual: rr,
                    iterations: it,
                });
            }
            if rr < best_res {
                best = x.clone();
                best_res = rr;
            }
            r = s;
            continue;
        }
        let s_hat = precond(&s);
        let t = op.apply(&s_hat);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(NonConvergence {
                best,
                relative_residual: best_res,
                iterations: it,
            });
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
        }
        r = s.iter().zip(&t).map(|(si, ti)| si - omega * ti).collect();
        let rel = norm2(&r) / bnorm;
        if rel < best_res {
            best = x.clone();
            best_res = rel;
        }
        if rel <= rel_tol {
            let rr = true_rel_res(&x);
            if rr <= rel_tol {
                return Ok(IterativeSolution {
                    x,
                    relative_residual: rr,
                    iterations: it,
                });
            }
        }
        if omega == 0.0 {
            return Err(NonConvergence {
                best,
                relative_residual: best_res,
                iterations: it,
            });
        }
    }
    let rr = true_rel_res(&best);
    Err(NonConvergence {
        best,
        relative_residual: rr,
        iterations: max_iter,
    })
}
