//! Full-order optimal control: the controllability Gramian, the linear
//! system for the optimal final-time adjoint, and the discrete objective.
//!
//! The optimal control of the linear-quadratic problem is fully determined
//! by the final-time adjoint φ_T, which solves
//!
//! ```text
//!   (Eᵀ + M G_μ) φ_T = M (Φ(T,0) x⁰_μ − x^T_μ),
//! ```
//!
//! where the Gramian G_μ p = −x(T) closes the optimality chain: stage
//! adjoints backward from p, control u = −R⁻¹Bᵀφ, controlled state forward
//! from zero. The operator is applied matrix-free; it is never assembled at
//! full order.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::io::{read_block, write_block};
use crate::linalg::solve::{bicgstab, FnOperator};
use crate::linalg::space::{orthonormalize, MetricTag};
use crate::ltv::{ControlSystem, TimeGrid, Trajectory};

/// The weighted controllability Gramian G_μ as a matrix-free linear map.
pub struct GramianOperator<'a> {
    sys: &'a ControlSystem,
    grid: &'a TimeGrid,
    mu: Vec<f64>,
}

impl<'a> GramianOperator<'a> {
    pub fn new(sys: &'a ControlSystem, grid: &'a TimeGrid, mu: &[f64]) -> Self {
        GramianOperator {
            sys,
            grid,
            mu: mu.to_vec(),
        }
    }

    /// G_μ p = −x(T) of the optimality chain driven by the terminal adjoint p.
    pub fn apply(&self, p: &[f64]) -> Result<Vec<f64>> {
        let n = self.sys.n();
        if p.len() != n {
            return Err(Error::DimensionMismatch {
                context: "GramianOperator::apply",
                expected: n,
                found: p.len(),
            });
        }
        let chi = self.sys.integrate_adjoint_stages(self.grid, &self.mu, p)?;
        let u = self.sys.control_from_adjoint(self.grid, &self.mu, &chi)?;
        let x = self.sys.integrate_primal(self.grid, &self.mu, &vec![0.0; n], &u)?;
        let mut out = x.into_iter().next_back().unwrap();
        for v in &mut out {
            *v = -*v;
        }
        Ok(out)
    }
}

/// Solver settings for [`solve_fom`]; the defaults mirror the Bi-CGSTAB
/// setting of the reference experiment (relative tolerance 1e-8).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FomOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Diagonal (Jacobi) preconditioning with diag(Eᵀ).
    pub jacobi: bool,
}

impl Default for FomOptions {
    fn default() -> Self {
        FomOptions {
            rel_tol: 1e-8,
            max_iter: 2000,
            jacobi: false,
        }
    }
}

/// Solution of the full-order optimal control problem at one parameter.
#[derive(Debug, Clone)]
pub struct OptimalSolution {
    /// Optimal final-time adjoint φ_T.
    pub phi_t: Vec<f64>,
    /// Optimal control at the stage times t_1..t_nt.
    pub u: Vec<Vec<f64>>,
    /// Optimal state trajectory on the grid nodes.
    pub x: Trajectory,
    /// Stage adjoint trajectory the control is built from.
    pub phi: Trajectory,
    /// Value of the discrete objective at the optimum.
    pub objective: f64,
    /// Relative residual of the final-time-adjoint linear system.
    pub solver_residual: f64,
    /// Bi-CGSTAB iterations spent.
    pub iterations: usize,
}

/// Solve the full-order optimality system for one parameter, matrix-free.
pub fn solve_fom(sys: &ControlSystem, grid: &TimeGrid, mu: &[f64], rel_tol: f64) -> Result<OptimalSolution> {
    solve_fom_with(
        sys,
        grid,
        mu,
        &FomOptions {
            rel_tol,
            ..FomOptions::default()
        },
    )
}

pub fn solve_fom_with(
    sys: &ControlSystem,
    grid: &TimeGrid,
    mu: &[f64],
    opts: &FomOptions,
) -> Result<OptimalSolution> {
    let n = sys.n();
    // Prime all step factorizations so the matrix-free applications below
    // cannot fail mid-iteration.
    for k in 0..=grid.nt() {
        sys.step_factor(grid, mu, k)?;
    }
    let x0 = sys.x0().evaluate(mu);
    let xt = sys.xt().evaluate(mu);
    let free_final = sys.apply_state_transition(grid, mu, &x0)?;
    let diff: Vec<f64> = free_final.iter().zip(&xt).map(|(a, b)| a - b).collect();
    let rhs = sys.m().apply(&diff);

    let gramian = GramianOperator::new(sys, grid, mu);
    let op = FnOperator::new(n, |p: &[f64]| {
        let gp = gramian.apply(p).expect("step factors are prevalidated");
        let mgp = sys.m().apply(&gp);
        let etp = sys.e().apply_transpose(p);
        etp.iter().zip(&mgp).map(|(a, b)| a + b).collect()
    });

    let jacobi_diag: Option<Vec<f64>> = if opts.jacobi {
        let et = sys.e().transpose();
        let mut d = vec![0.0; n];
        for (r, c, v) in et.triplets() {
            if r == c {
                d[r] += v;
            }
        }
        Some(d)
    } else {
        None
    };

    let sol = bicgstab(&op, &rhs, opts.rel_tol, opts.max_iter, jacobi_diag.as_deref())
        .map_err(|nc| nc.into_error())?;

    let phi_t = sol.x;
    let phi = sys.integrate_adjoint_stages(grid, mu, &phi_t)?;
    let u = sys.control_from_adjoint(grid, mu, &phi)?;
    let x = sys.integrate_primal(grid, mu, &x0, &u)?;
    let objective = objective(sys, grid, mu, &u, &x);
    Ok(OptimalSolution {
        phi_t,
        u,
        x,
        phi,
        objective,
        solver_residual: sol.relative_residual,
        iterations: sol.iterations,
    })
}

/// Discrete objective `½‖C(x(T) − x^T_μ)‖² + ½·dt·Σ_k u_kᵀ R(t_k) u_k`
/// (right-endpoint quadrature, matching the implicit Euler stepper).
pub fn objective(sys: &ControlSystem, grid: &TimeGrid, mu: &[f64], u: &[Vec<f64>], x: &Trajectory) -> f64 {
    let xt = sys.xt().evaluate(mu);
    let x_final = x.last().expect("nonempty trajectory");
    let diff: Vec<f64> = x_final.iter().zip(&xt).map(|(a, b)| a - b).collect();
    let cd = sys.c().apply(&diff);
    let output_term: f64 = cd.iter().map(|v| v * v).sum();
    let mut control_term = 0.0;
    for (k, uk) in u.iter().enumerate() {
        let r = sys.r().at_stage(k + 1);
        let uv = nalgebra::DVector::from_column_slice(uk);
        control_term += (uv.transpose() * r * &uv)[(0, 0)];
    }
    0.5 * output_term + 0.5 * grid.dt() * control_term
}

/// Relative G-norm distance of φ from range((Eᵀ)⁻¹M) = range((Eᵀ)⁻¹Cᵀ).
///
/// The optimal final-time adjoint always lies in this rank-s subspace;
/// the residual is solver-tolerance sized for converged solves.
pub fn range_projection_residual(sys: &ControlSystem, phi: &[f64]) -> Result<f64> {
    let ef = sys.e_factor()?;
    let s = sys.num_outputs();
    let ct = sys.c().transpose();
    let mut cols = Vec::with_capacity(s);
    for j in 0..s {
        let mut ej = vec![0.0; s];
        ej[j] = 1.0;
        let ctj = ct.apply(&ej);
        cols.push(ef.solve_transpose(&ctj));
    }
    let basis = orthonormalize(sys.space().gram(), &cols, MetricTag::Gram);
    let coeffs = crate::linalg::space::g_project(sys.space(), &basis, phi)?;
    let proj = basis.lift(&coeffs);
    let resid: Vec<f64> = phi.iter().zip(&proj).map(|(a, b)| a - b).collect();
    let denom = sys.space().g_norm(phi);
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(sys.space().g_norm(&resid) / denom)
}

#[derive(Debug, Serialize, Deserialize)]
struct SolutionManifest {
    n: usize,
    nt: usize,
    num_controls: usize,
    objective: f64,
    solver_residual: f64,
    iterations: usize,
}

/// Persist an optimal solution as binary blocks plus a JSON manifest.
pub fn save_optimal_solution(dir: &Path, sol: &OptimalSolution) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = sol.phi_t.len();
    let nt = sol.x.len() - 1;
    let manifest = SolutionManifest {
        n,
        nt,
        num_controls: if sol.u.is_empty() { 0 } else { sol.u[0].len() },
        objective: sol.objective,
        solver_residual: sol.solver_residual,
        iterations: sol.iterations,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    write_block(&dir.join("phi_t"), &DMatrix::from_column_slice(n, 1, &sol.phi_t), MetricTag::None)?;
    write_block(&dir.join("x"), &traj_to_matrix(&sol.x), MetricTag::None)?;
    write_block(&dir.join("phi"), &traj_to_matrix(&sol.phi), MetricTag::None)?;
    write_block(&dir.join("u"), &traj_to_matrix(&sol.u), MetricTag::None)?;
    Ok(())
}

pub fn load_optimal_solution(dir: &Path) -> Result<OptimalSolution> {
    let json = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: SolutionManifest =
        serde_json::from_str(&json).map_err(|e| Error::Format(e.to_string()))?;
    let (phi_t, _) = read_block(&dir.join("phi_t"))?;
    let (x, _) = read_block(&dir.join("x"))?;
    let (phi, _) = read_block(&dir.join("phi"))?;
    let (u, _) = read_block(&dir.join("u"))?;
    Ok(OptimalSolution {
        phi_t: phi_t.column(0).iter().copied().collect(),
        u: matrix_to_traj(&u),
        x: matrix_to_traj(&x),
        phi: matrix_to_traj(&phi),
        objective: manifest.objective,
        solver_residual: manifest.solver_residual,
        iterations: manifest.iterations,
    })
}

fn traj_to_matrix(traj: &[Vec<f64>]) -> DMatrix<f64> {
    if traj.is_empty() {
        return DMatrix::zeros(0, 0);
    }
    let n = traj[0].len();
    DMatrix::from_fn(n, traj.len(), |i, j| traj[j][i])
}

fn matrix_to_traj(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.ncols()).map(|j| m.column(j).iter().copied().collect()).collect()
}
