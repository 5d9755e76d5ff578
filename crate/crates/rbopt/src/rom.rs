//! Reduced dynamical systems by Petrov-Galerkin projection, the reduced
//! Gramian, and the fully reduced final-time-adjoint solve.
//!
//! All affine operator blocks are compressed once against the bases; online
//! assembly of A(μ;t), B(μ;t) then touches only k×k data. The fully reduced
//! solve uses the precomputed blocks of the offline cache and exactly
//! 2N + 1 reduced integrations per parameter: N adjoint/primal pairs for
//! the reduced Gramian columns plus one homogeneous primal sweep.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::OfflineCache;
use crate::linalg::space::{BasisMatrix, MetricTag};
use crate::ltv::{ControlSystem, ControlWeight, Theta, TimeGrid};

/// The five basis matrices of the combined reduced model.
#[derive(Debug, Clone)]
pub struct ReducedBases {
    pub v_pr: BasisMatrix,
    pub w_pr: BasisMatrix,
    pub v_ad: BasisMatrix,
    pub w_ad: BasisMatrix,
    /// Final-time adjoint basis, G-orthonormal.
    pub v_n: BasisMatrix,
}

impl ReducedBases {
    /// Galerkin pairs W = V; the columns are G-orthonormal, which makes
    /// them E-biorthogonal whenever they live on the subspace where the
    /// boundary-treated mass matrix agrees with G.
    pub fn galerkin(v_pr: BasisMatrix, v_ad: BasisMatrix, v_n: BasisMatrix) -> Self {
        ReducedBases {
            w_pr: v_pr.clone(),
            v_pr,
            w_ad: v_ad.clone(),
            v_ad,
            v_n,
        }
    }

    pub fn k_pr(&self) -> usize {
        self.v_pr.k()
    }

    pub fn k_ad(&self) -> usize {
        self.v_ad.k()
    }

    /// Dimension N of the final-time-adjoint space.
    pub fn n_fta(&self) -> usize {
        self.v_n.k()
    }
}

/// Offline-compressed reduced system.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    k_pr: usize,
    k_ad: usize,
    m_in: usize,
    e_pr: DMatrix<f64>,
    e_ad: DMatrix<f64>,
    a_pr: Vec<DMatrix<f64>>,
    a_ad: Vec<DMatrix<f64>>,
    b_pr: Vec<DMatrix<f64>>,
    /// Bᵀ V_ad per affine term of B (m × k_ad).
    b_ad_t: Vec<DMatrix<f64>>,
    theta_a: Vec<Theta>,
    theta_b: Vec<Theta>,
    /// Projected initial-state components V_prᵀ G x0_q.
    x0_pr: Vec<DVector<f64>>,
    theta_x0: Vec<Theta>,
    r: ControlWeight,
}

/// Compress the full system onto the bases; every affine block becomes a
/// dense k×k (or k×m) matrix.
pub fn build_reduced_system(sys: &ControlSystem, bases: &ReducedBases) -> Result<ReducedSystem> {
    let v_pr = bases.v_pr.columns();
    let w_pr = bases.w_pr.columns();
    let v_ad = bases.v_ad.columns();
    let w_ad = bases.w_ad.columns();

    let e_pr = w_pr.transpose() * sys.e().mul_dense(v_pr);
    let e_ad = w_ad.transpose() * sys.e().mul_dense(v_ad);
    check_invertible(&e_pr, "primal")?;
    check_invertible(&e_ad, "adjoint")?;

    let mut a_pr = Vec::new();
    let mut a_ad = Vec::new();
    for q in 0..sys.a().num_terms() {
        let aq = sys.a().component(q);
        a_pr.push(w_pr.transpose() * aq.mul_dense(v_pr));
        a_ad.push(w_ad.transpose() * aq.mul_dense(v_ad));
    }
    let mut b_pr = Vec::new();
    let mut b_ad_t = Vec::new();
    for q in 0..sys.b().num_terms() {
        let bq = sys.b().component(q);
        b_pr.push(w_pr.transpose() * bq.to_dense());
        b_ad_t.push(bq.mul_transpose_dense(v_ad));
    }
    let gram = sys.space().gram();
    let g_vpr = gram.mul_dense(v_pr);
    let mut x0_pr = Vec::new();
    for q in 0..sys.x0().num_terms() {
        let x0q = DVector::from_column_slice(sys.x0().component(q));
        x0_pr.push(g_vpr.transpose() * &x0q);
    }
    Ok(ReducedSystem {
        k_pr: bases.k_pr(),
        k_ad: bases.k_ad(),
        m_in: sys.num_controls(),
        e_pr,
        e_ad,
        a_pr,
        a_ad,
        b_pr,
        b_ad_t,
        theta_a: sys.a().coefficients().to_vec(),
        theta_b: sys.b().coefficients().to_vec(),
        x0_pr,
        theta_x0: sys.x0().coefficients().to_vec(),
        r: sys.r().clone(),
    })
}

fn check_invertible(m: &DMatrix<f64>, which: &'static str) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax.max(1e-300)) {
        return Err(match which {
            "primal" => Error::BiorthogonalityViolated { which: "primal" },
            _ => Error::BiorthogonalityViolated { which: "adjoint" },
        });
    }
    Ok(())
}

impl ReducedSystem {
    /// Reassemble from serialized blocks (archive loading).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        e_pr: DMatrix<f64>,
        e_ad: DMatrix<f64>,
        a_pr: Vec<DMatrix<f64>>,
        a_ad: Vec<DMatrix<f64>>,
        b_pr: Vec<DMatrix<f64>>,
        b_ad_t: Vec<DMatrix<f64>>,
        theta_a: Vec<Theta>,
        theta_b: Vec<Theta>,
        x0_pr: Vec<DVector<f64>>,
        theta_x0: Vec<Theta>,
        r: ControlWeight,
        m_in: usize,
    ) -> Self {
        ReducedSystem {
            k_pr: e_pr.nrows(),
            k_ad: e_ad.nrows(),
            m_in,
            e_pr,
            e_ad,
            a_pr,
            a_ad,
            b_pr,
            b_ad_t,
            theta_a,
            theta_b,
            x0_pr,
            theta_x0,
            r,
        }
    }

    pub fn x0_pr_component(&self, q: usize) -> &DVector<f64> {
        &self.x0_pr[q]
    }

    pub fn num_x0_terms(&self) -> usize {
        self.x0_pr.len()
    }

    pub fn theta_x0(&self) -> &[Theta] {
        &self.theta_x0
    }

    pub fn k_pr(&self) -> usize {
        self.k_pr
    }

    pub fn k_ad(&self) -> usize {
        self.k_ad
    }

    pub fn num_controls(&self) -> usize {
        self.m_in
    }

    pub fn e_pr(&self) -> &DMatrix<f64> {
        &self.e_pr
    }

    pub fn e_ad(&self) -> &DMatrix<f64> {
        &self.e_ad
    }

    pub fn num_a_terms(&self) -> usize {
        self.a_pr.len()
    }

    pub fn num_b_terms(&self) -> usize {
        self.b_pr.len()
    }

    pub fn a_pr_block(&self, q: usize) -> &DMatrix<f64> {
        &self.a_pr[q]
    }

    pub fn a_ad_block(&self, q: usize) -> &DMatrix<f64> {
        &self.a_ad[q]
    }

    pub fn b_pr_block(&self, q: usize) -> &DMatrix<f64> {
        &self.b_pr[q]
    }

    pub fn b_ad_t_block(&self, q: usize) -> &DMatrix<f64> {
        &self.b_ad_t[q]
    }

    pub fn theta_a(&self) -> &[Theta] {
        &self.theta_a
    }

    pub fn theta_b(&self) -> &[Theta] {
        &self.theta_b
    }

    pub fn r(&self) -> &ControlWeight {
        &self.r
    }

    pub fn assemble_a_pr(&self, mu: &[f64], t: f64) -> DMatrix<f64> {
        assemble(&self.a_pr, &self.theta_a, mu, t, self.k_pr, self.k_pr)
    }

    pub fn assemble_a_ad(&self, mu: &[f64], t: f64) -> DMatrix<f64> {
        assemble(&self.a_ad, &self.theta_a, mu, t, self.k_ad, self.k_ad)
    }

    pub fn assemble_b_pr(&self, mu: &[f64], t: f64) -> DMatrix<f64> {
        assemble(&self.b_pr, &self.theta_b, mu, t, self.k_pr, self.m_in)
    }

    /// Bᵀ(μ;t) V_ad, the block the reduced control law uses.
    pub fn assemble_b_ad_t(&self, mu: &[f64], t: f64) -> DMatrix<f64> {
        assemble(&self.b_ad_t, &self.theta_b, mu, t, self.m_in, self.k_ad)
    }

    /// Reduced coefficients of the projected initial state P_{V_pr} x0(μ).
    pub fn projected_x0(&self, mu: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.k_pr);
        for (v, th) in self.x0_pr.iter().zip(&self.theta_x0) {
            out += v * th.eval(mu, 0.0);
        }
        out
    }
}

fn assemble(
    blocks: &[DMatrix<f64>],
    thetas: &[Theta],
    mu: &[f64],
    t: f64,
    rows: usize,
    cols: usize,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    for (b, th) in blocks.iter().zip(thetas) {
        let w = th.eval(mu, t);
        if w != 0.0 {
            out += b * w;
        }
    }
    out
}

type SharedLu = Rc<nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>;

/// Per-(μ, grid) reduced integrator with lazily factored step matrices;
/// every reduced integration at the same parameter shares the factors.
pub struct ReducedFlow<'a> {
    red: &'a ReducedSystem,
    grid: TimeGrid,
    mu: Vec<f64>,
    pr_lu: RefCell<Vec<Option<SharedLu>>>,
    ad_lu: RefCell<Vec<Option<SharedLu>>>,
}

impl<'a> ReducedFlow<'a> {
    pub fn new(red: &'a ReducedSystem, grid: &TimeGrid, mu: &[f64]) -> Self {
        ReducedFlow {
            red,
            grid: *grid,
            mu: mu.to_vec(),
            pr_lu: RefCell::new(vec![None; grid.nt() + 1]),
            ad_lu: RefCell::new(vec![None; grid.nt() + 1]),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn reduced(&self) -> &ReducedSystem {
        self.red
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    fn pr_step(&self, k: usize) -> Result<SharedLu> {
        if let Some(lu) = &self.pr_lu.borrow()[k] {
            return Ok(lu.clone());
        }
        let dt = self.grid.dt();
        let m = &self.red.e_pr - self.red.assemble_a_pr(&self.mu, self.grid.node(k)) * dt;
        let lu = Rc::new(m.lu());
        self.pr_lu.borrow_mut()[k] = Some(lu.clone());
        Ok(lu)
    }

    fn ad_step(&self, k: usize) -> Result<SharedLu> {
        if let Some(lu) = &self.ad_lu.borrow()[k] {
            return Ok(lu.clone());
        }
        let dt = self.grid.dt();
        let m = self.red.e_ad.transpose() - self.red.assemble_a_ad(&self.mu, self.grid.node(k)).transpose() * dt;
        let lu = Rc::new(m.lu());
        self.ad_lu.borrow_mut()[k] = Some(lu.clone());
        Ok(lu)
    }

    /// Reduced primal trajectory from initial coefficients with a control
    /// at the stage times; empty `u` means u ≡ 0.
    pub fn integrate_primal(&self, x0: &DVector<f64>, u: &[Vec<f64>]) -> Result<Vec<DVector<f64>>> {
        let nt = self.grid.nt();
        let dt = self.grid.dt();
        let mut traj = Vec::with_capacity(nt + 1);
        traj.push(x0.clone());
        if self.red.k_pr == 0 {
            return Ok(vec![DVector::zeros(0); nt + 1]);
        }
        for k in 1..=nt {
            let mut rhs = &self.red.e_pr * &traj[k - 1];
            if !u.is_empty() {
                let b = self.red.assemble_b_pr(&self.mu, self.grid.node(k));
                rhs += b * DVector::from_column_slice(&u[k - 1]) * dt;
            }
            let lu = self.pr_step(k)?;
            let x = lu.solve(&rhs).ok_or(Error::SingularStep { time_index: k })?;
            traj.push(x);
        }
        Ok(traj)
    }

    /// Plain reduced adjoint: φ̂_nt equals the terminal coefficients.
    pub fn integrate_adjoint(&self, terminal: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.adjoint_backward(terminal, false)
    }

    /// Stage-adjoint variant mirroring the full-order optimality chain.
    pub fn adjoint_stages(&self, terminal: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.adjoint_backward(terminal, true)
    }

    fn adjoint_backward(&self, terminal: &DVector<f64>, stage_shift: bool) -> Result<Vec<DVector<f64>>> {
        let nt = self.grid.nt();
        if self.red.k_ad == 0 {
            return Ok(vec![DVector::zeros(0); nt + 1]);
        }
        let et = self.red.e_ad.transpose();
        let mut traj = vec![DVector::zeros(self.red.k_ad); nt + 1];
        if stage_shift {
            let lu = self.ad_step(nt)?;
            let rhs = &et * terminal;
            traj[nt] = lu.solve(&rhs).ok_or(Error::SingularStep { time_index: nt })?;
        } else {
            traj[nt] = terminal.clone();
        }
        for k in (0..nt).rev() {
            let lu = self.ad_step(k)?;
            let rhs = &et * &traj[k + 1];
            traj[k] = lu.solve(&rhs).ok_or(Error::SingularStep { time_index: k })?;
        }
        Ok(traj)
    }

    /// û_k = −R(t_k)⁻¹ (Bᵀ(μ;t_k) V_ad) φ̂_k at the stage times.
    pub fn control_from_adjoint(&self, phi: &[DVector<f64>]) -> Result<Vec<Vec<f64>>> {
        let nt = self.grid.nt();
        let mut u = Vec::with_capacity(nt);
        for k in 1..=nt {
            if self.red.k_ad == 0 {
                u.push(vec![0.0; self.red.m_in]);
                continue;
            }
            let bt = self.red.assemble_b_ad_t(&self.mu, self.grid.node(k));
            let btphi = bt * &phi[k];
            let uk = self.red.r.solve(k, btphi.as_slice())?;
            u.push(uk.iter().map(|v| -v).collect());
        }
        Ok(u)
    }

    /// Reduced Gramian Ĝ_μ p̂ = −x̂(T): k_ad coefficients in, k_pr out.
    pub fn apply_reduced_gramian(&self, p_hat: &DVector<f64>) -> Result<DVector<f64>> {
        let chi = self.adjoint_stages(p_hat)?;
        let u = self.control_from_adjoint(&chi)?;
        let x = self.integrate_primal(&DVector::zeros(self.red.k_pr), &u)?;
        Ok(-x.last().unwrap().clone())
    }

    /// Φ̂(T,0) P_{V_pr} x0(μ): the reduced free dynamics at final time.
    pub fn free_final_state(&self) -> Result<DVector<f64>> {
        let x0 = self.red.projected_x0(&self.mu);
        let traj = self.integrate_primal(&x0, &[])?;
        Ok(traj.into_iter().next_back().unwrap())
    }
}

/// Solution of the fully reduced least squares problem.
#[derive(Debug, Clone)]
pub struct FullyReducedSolution {
    /// Coefficients of φ^N in the V_N basis.
    pub alpha: DVector<f64>,
    /// The minimized residual value (the reduced error estimator at α,
    /// without the constant c).
    pub reduced_residual: f64,
    /// Reduced free-dynamics final state Φ̂(T,0) P_{V_pr} x0(μ).
    pub free_final: DVector<f64>,
    /// Reduced Gramian applied to the V_ad projections of the V_N columns.
    pub gramian_columns: DMatrix<f64>,
}

impl FullyReducedSolution {
    /// Lift φ^N = V_N α into the ambient space.
    pub fn lift_phi(&self, bases: &ReducedBases) -> Vec<f64> {
        bases.v_n.lift(&self.alpha)
    }
}

/// Reduced optimal trajectories reconstructed from α.
pub struct ReducedOptimalTrajectories {
    pub x_hat: Vec<DVector<f64>>,
    pub phi_hat: Vec<DVector<f64>>,
    pub u: Vec<Vec<f64>>,
}

/// Solve the N×N normal equations of the fully reduced model online.
///
/// Uses the offline blocks of `cache` and exactly 2N + 1 reduced
/// integrations; nothing here touches full-order data.
pub fn solve_fully_reduced(
    red: &ReducedSystem,
    cache: &OfflineCache,
    grid: &TimeGrid,
    mu: &[f64],
) -> Result<FullyReducedSolution> {
    let flow = ReducedFlow::new(red, grid, mu);
    solve_fully_reduced_with_flow(&flow, cache)
}

pub fn solve_fully_reduced_with_flow(
    flow: &ReducedFlow<'_>,
    cache: &OfflineCache,
) -> Result<FullyReducedSolution> {
    let mu = flow.mu().to_vec();
    let n_fta = cache.n_fta();
    let free_final = flow.free_final_state()?;
    let mut gramian_columns = DMatrix::zeros(flow.reduced().k_pr(), n_fta);
    for j in 0..n_fta {
        let p_hat = cache.m11().column(j).into_owned();
        let col = flow.apply_reduced_gramian(&p_hat)?;
        gramian_columns.set_column(j, &col);
    }
    let (k_mat, b_vec, _rhs_sq) = cache.fully_reduced_normal_system(&mu, &free_final, &gramian_columns);
    let alpha = if n_fta == 0 {
        DVector::zeros(0)
    } else {
        let chol = k_mat.clone().cholesky().ok_or(Error::FullyReducedSingular)?;
        chol.solve(&b_vec)
    };
    // The stored residual is the value of the reduced error estimator at α,
    // evaluated through the same quadratic form the estimator uses.
    let g_alpha = &gramian_columns * &alpha;
    let residual_sq = cache.reduced_residual_sq_single(&mu, &free_final, &g_alpha, &alpha);
    Ok(FullyReducedSolution {
        alpha,
        reduced_residual: residual_sq.max(0.0).sqrt(),
        free_final,
        gramian_columns,
    })
}

/// Rebuild the reduced optimal trajectories belonging to α: stage adjoints
/// from the V_ad projection of φ^N, the induced control, and the controlled
/// state from the projected initial condition.
pub fn reconstruct_reduced_solution(
    red: &ReducedSystem,
    cache: &OfflineCache,
    grid: &TimeGrid,
    mu: &[f64],
    alpha: &DVector<f64>,
) -> Result<ReducedOptimalTrajectories> {
    let flow = ReducedFlow::new(red, grid, mu);
    let p_hat = cache.m11() * alpha;
    let phi_hat = flow.adjoint_stages(&p_hat)?;
    let u = flow.control_from_adjoint(&phi_hat)?;
    let x0 = red.projected_x0(mu);
    let x_hat = flow.integrate_primal(&x0, &u)?;
    Ok(ReducedOptimalTrajectories { x_hat, phi_hat, u })
}

/// Identity-basis reduction used by tests: V = W = I_n.
pub fn full_identity_bases(n: usize, n_fta_basis: BasisMatrix) -> ReducedBases {
    let eye = DMatrix::identity(n, n);
    ReducedBases {
        v_pr: BasisMatrix::new(eye.clone(), MetricTag::None),
        w_pr: BasisMatrix::new(eye.clone(), MetricTag::None),
        v_ad: BasisMatrix::new(eye.clone(), MetricTag::None),
        w_ad: BasisMatrix::new(eye, MetricTag::None),
        v_n: n_fta_basis,
    }
}
