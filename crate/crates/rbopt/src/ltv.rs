//! Parameter-separable linear time-varying control systems and their
//! implicit Euler time integration.
//!
//! A system is the quintuple (E, A(μ;t), B(μ;t), C, R) together with the
//! inner product matrix G and affine initial/target states. The primal
//! and adjoint equations
//!
//! ```text
//!   E x'(t) = A(μ;t) x(t) + B(μ;t) u(t),      -Eᵀ φ'(t) = A(μ;t)ᵀ φ(t)
//! ```
//!
//! are integrated with uniform implicit Euler steps; one sparse LU of the
//! step matrix `E − dt·A(μ;t_k)` serves the primal step and, transposed,
//! the adjoint step at the same time index.

use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::csr::CsrMatrix;
use crate::linalg::factor::{param_bits_hash, FactorCache, FactorKey, SparseFactor};
use crate::linalg::space::InnerProductSpace;

/// Scalar coefficient θ_q(μ; t) of an affine term.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Theta {
    Const(f64),
    /// μ\[index\]
    Param { index: usize },
    /// scale·(t − center)² + offset
    ShiftedQuadratic { scale: f64, center: f64, offset: f64 },
    /// slope·t + intercept
    TimeLinear { slope: f64, intercept: f64 },
}

impl Theta {
    pub fn eval(&self, mu: &[f64], t: f64) -> f64 {
        match *self {
            Theta::Const(c) => c,
            Theta::Param { index } => mu[index],
            Theta::ShiftedQuadratic { scale, center, offset } => scale * (t - center) * (t - center) + offset,
            Theta::TimeLinear { slope, intercept } => slope * t + intercept,
        }
    }
}

/// Σ_q θ_q(μ;t)·A_q with fixed sparse components.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    components: Vec<CsrMatrix>,
    coefficients: Vec<Theta>,
}

impl AffineOperator {
    pub fn new(components: Vec<CsrMatrix>, coefficients: Vec<Theta>) -> Result<Self> {
        if components.is_empty() || components.len() != coefficients.len() {
            return Err(Error::InvalidConfig(
                "affine operator needs matching nonempty component/coefficient lists".into(),
            ));
        }
        let (r, c) = (components[0].rows(), components[0].cols());
        for m in &components {
            if m.rows() != r || m.cols() != c {
                return Err(Error::DimensionMismatch {
                    context: "AffineOperator components",
                    expected: r,
                    found: m.rows(),
                });
            }
        }
        Ok(AffineOperator {
            components,
            coefficients,
        })
    }

    /// A single parameter- and time-independent term.
    pub fn constant(m: CsrMatrix) -> Self {
        AffineOperator {
            components: vec![m],
            coefficients: vec![Theta::Const(1.0)],
        }
    }

    pub fn rows(&self) -> usize {
        self.components[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.components[0].cols()
    }

    pub fn num_terms(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, q: usize) -> &CsrMatrix {
        &self.components[q]
    }

    pub fn coefficient(&self, q: usize) -> &Theta {
        &self.coefficients[q]
    }

    pub fn coefficients(&self) -> &[Theta] {
        &self.coefficients
    }

    pub fn eval_coefficients(&self, mu: &[f64], t: f64) -> Vec<f64> {
        self.coefficients.iter().map(|th| th.eval(mu, t)).collect()
    }

    /// (Σ_q θ_q A_q) x without assembling the sum.
    pub fn apply(&self, mu: &[f64], t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows()];
        for (m, th) in self.components.iter().zip(&self.coefficients) {
            let w = th.eval(mu, t);
            if w == 0.0 {
                continue;
            }
            let y = m.apply(x);
            for i in 0..out.len() {
                out[i] += w * y[i];
            }
        }
        out
    }

    pub fn apply_transpose(&self, mu: &[f64], t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for (m, th) in self.components.iter().zip(&self.coefficients) {
            let w = th.eval(mu, t);
            if w == 0.0 {
                continue;
            }
            let y = m.apply_transpose(x);
            for i in 0..out.len() {
                out[i] += w * y[i];
            }
        }
        out
    }

    pub fn assemble(&self, mu: &[f64], t: f64) -> CsrMatrix {
        let weights = self.eval_coefficients(mu, t);
        let terms: Vec<(&CsrMatrix, f64)> = self.components.iter().zip(weights).map(|(m, w)| (m, w)).collect();
        CsrMatrix::weighted_sum(&terms)
    }
}

/// Σ_q θ_q(μ)·v_q, the affine initial or target state.
#[derive(Debug, Clone)]
pub struct AffineVector {
    components: Vec<Vec<f64>>,
    coefficients: Vec<Theta>,
}

impl AffineVector {
    pub fn new(components: Vec<Vec<f64>>, coefficients: Vec<Theta>) -> Result<Self> {
        if components.is_empty() || components.len() != coefficients.len() {
            return Err(Error::InvalidConfig(
                "affine vector needs matching nonempty component/coefficient lists".into(),
            ));
        }
        let n = components[0].len();
        for v in &components {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "AffineVector components",
                    expected: n,
                    found: v.len(),
                });
            }
        }
        Ok(AffineVector {
            components,
            coefficients,
        })
    }

    pub fn zero(n: usize) -> Self {
        AffineVector {
            components: vec![vec![0.0; n]],
            coefficients: vec![Theta::Const(1.0)],
        }
    }

    pub fn constant(v: Vec<f64>) -> Self {
        AffineVector {
            components: vec![v],
            coefficients: vec![Theta::Const(1.0)],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].len()
    }

    pub fn num_terms(&self) -> usize {
        self.components.len()
    }

    pub fn component(&self, q: usize) -> &[f64] {
        &self.components[q]
    }

    pub fn coefficients(&self) -> &[Theta] {
        &self.coefficients
    }

    /// Coefficients are functions of the parameter only.
    pub fn eval_coefficients(&self, mu: &[f64]) -> Vec<f64> {
        self.coefficients.iter().map(|th| th.eval(mu, 0.0)).collect()
    }

    pub fn evaluate(&self, mu: &[f64]) -> Vec<f64> {
        let w = self.eval_coefficients(mu);
        let mut out = vec![0.0; self.dim()];
        for (v, wq) in self.components.iter().zip(w) {
            for i in 0..out.len() {
                out[i] += wq * v[i];
            }
        }
        out
    }
}

/// Control energy weight R(t): SPD m×m, constant or tabulated on the stage
/// times t_1..t_nt.
#[derive(Debug, Clone)]
pub enum ControlWeight {
    Constant(DMatrix<f64>),
    PerStage(Vec<DMatrix<f64>>),
}

impl ControlWeight {
    pub fn scalar(r: f64) -> Self {
        ControlWeight::Constant(DMatrix::from_element(1, 1, r))
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlWeight::Constant(m) => m.nrows(),
            ControlWeight::PerStage(v) => v[0].nrows(),
        }
    }

    /// R at stage k ∈ 1..=nt.
    pub fn at_stage(&self, k: usize) -> &DMatrix<f64> {
        match self {
            ControlWeight::Constant(m) => m,
            ControlWeight::PerStage(v) => &v[k - 1],
        }
    }

    /// R(t_k)⁻¹ y; errors if R is not invertible (violates positivity).
    pub fn solve(&self, k: usize, y: &[f64]) -> Result<Vec<f64>> {
        let r = self.at_stage(k);
        let chol = r.clone().cholesky().ok_or(Error::ControlWeightSingular)?;
        let x = chol.solve(&nalgebra::DVector::from_column_slice(y));
        Ok(x.iter().copied().collect())
    }
}

/// Uniform time grid on [0, T] with nt implicit Euler steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_final: f64,
    nt: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, nt: usize) -> Result<Self> {
        if !(t_final > 0.0) || nt < 1 {
            return Err(Error::InvalidConfig(format!(
                "time grid needs T > 0 and nt >= 1, got T = {t_final}, nt = {nt}"
            )));
        }
        Ok(TimeGrid { t_final, nt })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    /// Node t_k = k·dt for k = 0..=nt.
    pub fn node(&self, k: usize) -> f64 {
        self.dt() * k as f64
    }
}

/// State, adjoint and control trajectories on the grid nodes.
pub type Trajectory = Vec<Vec<f64>>;

/// The full-order control system.
pub struct ControlSystem {
    e: CsrMatrix,
    a: AffineOperator,
    b: AffineOperator,
    c: CsrMatrix,
    m: CsrMatrix,
    r: ControlWeight,
    space: InnerProductSpace,
    x0: AffineVector,
    xt: AffineVector,
    cache: FactorCache,
    e_factor: OnceLock<Arc<SparseFactor>>,
}

impl ControlSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        e: CsrMatrix,
        a: AffineOperator,
        b: AffineOperator,
        c: CsrMatrix,
        r: ControlWeight,
        space: InnerProductSpace,
        x0: AffineVector,
        xt: AffineVector,
    ) -> Result<Self> {
        let n = e.rows();
        if e.cols() != n || a.rows() != n || a.cols() != n || b.rows() != n || c.cols() != n {
            return Err(Error::DimensionMismatch {
                context: "ControlSystem::new",
                expected: n,
                found: a.rows(),
            });
        }
        if space.dim() != n || x0.dim() != n || xt.dim() != n {
            return Err(Error::DimensionMismatch {
                context: "ControlSystem::new (space / boundary states)",
                expected: n,
                found: space.dim(),
            });
        }
        if r.dim() != b.cols() {
            return Err(Error::DimensionMismatch {
                context: "ControlSystem::new (control weight)",
                expected: b.cols(),
                found: r.dim(),
            });
        }
        // M = CᵀC: symmetric PSD with rank ≤ s by construction.
        let m = ata(&c);
        Ok(ControlSystem {
            e,
            a,
            b,
            c,
            m,
            r,
            space,
            x0,
            xt,
            cache: FactorCache::new(64),
            e_factor: OnceLock::new(),
        })
    }

    pub fn with_cache_capacity(mut self, capacity: usize) -> Self {
        self.cache = FactorCache::new(capacity);
        self
    }

    pub fn n(&self) -> usize {
        self.e.rows()
    }

    pub fn num_controls(&self) -> usize {
        self.b.cols()
    }

    pub fn num_outputs(&self) -> usize {
        self.c.rows()
    }

    pub fn e(&self) -> &CsrMatrix {
        &self.e
    }

    pub fn a(&self) -> &AffineOperator {
        &self.a
    }

    pub fn b(&self) -> &AffineOperator {
        &self.b
    }

    pub fn c(&self) -> &CsrMatrix {
        &self.c
    }

    pub fn m(&self) -> &CsrMatrix {
        &self.m
    }

    pub fn r(&self) -> &ControlWeight {
        &self.r
    }

    pub fn space(&self) -> &InnerProductSpace {
        &self.space
    }

    pub fn x0(&self) -> &AffineVector {
        &self.x0
    }

    pub fn xt(&self) -> &AffineVector {
        &self.xt
    }

    pub fn factor_cache(&self) -> &FactorCache {
        &self.cache
    }

    /// LU of E, built on first use.
    pub fn e_factor(&self) -> Result<&SparseFactor> {
        if self.e_factor.get().is_none() {
            let f = SparseFactor::new(&self.e)?;
            let _ = self.e_factor.set(Arc::new(f));
        }
        Ok(self.e_factor.get().unwrap())
    }

    /// Cached LU of the step matrix E − dt·A(μ; t_k).
    pub fn step_factor(&self, grid: &TimeGrid, mu: &[f64], k: usize) -> Result<Arc<SparseFactor>> {
        let mut key_material: Vec<f64> = mu.to_vec();
        key_material.push(grid.dt());
        let key = FactorKey {
            param_hash: param_bits_hash(&key_material),
            time_index: k,
        };
        self.cache.get_or_build(key, || {
            let step = self.e.add_scaled(&self.a.assemble(mu, grid.node(k)), -grid.dt());
            SparseFactor::new(&step).map_err(|_| Error::SingularStep { time_index: k })
        })
    }

    /// Forward implicit Euler for the primal equation:
    /// `(E − dt·A(μ;t_k)) x_k = E x_{k−1} + dt·B(μ;t_k) u_k`, k = 1..nt.
    ///
    /// `u` holds the control at the stage times t_1..t_nt; pass an empty
    /// slice for u ≡ 0.
    pub fn integrate_primal(
        &self,
        grid: &TimeGrid,
        mu: &[f64],
        x_init: &[f64],
        u: &[Vec<f64>],
    ) -> Result<Trajectory> {
        let n = self.n();
        if x_init.len() != n {
            return Err(Error::DimensionMismatch {
                context: "integrate_primal (initial state)",
                expected: n,
                found: x_init.len(),
            });
        }
        if !u.is_empty() && u.len() != grid.nt() {
            return Err(Error::DimensionMismatch {
                context: "integrate_primal (control stages)",
                expected: grid.nt(),
                found: u.len(),
            });
        }
        let dt = grid.dt();
        let mut traj = Vec::with_capacity(grid.nt() + 1);
        traj.push(x_init.to_vec());
        for k in 1..=grid.nt() {
            let factor = self.step_factor(grid, mu, k)?;
            let mut rhs = self.e.apply(&traj[k - 1]);
            if !u.is_empty() {
                let bu = self.b.apply(mu, grid.node(k), &u[k - 1]);
                for i in 0..n {
                    rhs[i] += dt * bu[i];
                }
            }
            traj.push(factor.solve(&rhs));
        }
        Ok(traj)
    }

    /// Backward implicit Euler for the adjoint equation with φ_nt equal to
    /// the terminal datum: `(Eᵀ − dt·A(μ;t_k)ᵀ) φ_k = Eᵀ φ_{k+1}` for
    /// k = nt−1..0.
    pub fn integrate_adjoint(&self, grid: &TimeGrid, mu: &[f64], terminal: &[f64]) -> Result<Trajectory> {
        self.adjoint_backward(grid, mu, terminal, false)
    }

    /// Stage adjoints of the discrete optimality system: the terminal datum
    /// enters through the t_nt step, `(Eᵀ − dt·A(μ;t_nt)ᵀ) φ_nt = Eᵀ p`,
    /// and the recursion continues down to φ_0. These are the multipliers
    /// whose controls `−R⁻¹Bᵀφ_k` make the discrete objective stationary.
    pub fn integrate_adjoint_stages(
        &self,
        grid: &TimeGrid,
        mu: &[f64],
        terminal: &[f64],
    ) -> Result<Trajectory> {
        self.adjoint_backward(grid, mu, terminal, true)
    }

    fn adjoint_backward(
        &self,
        grid: &TimeGrid,
        mu: &[f64],
        terminal: &[f64],
        stage_shift: bool,
    ) -> Result<Trajectory> {
        let n = self.n();
        if terminal.len() != n {
            return Err(Error::DimensionMismatch {
                context: "integrate_adjoint (terminal state)",
                expected: n,
                found: terminal.len(),
            });
        }
        let nt = grid.nt();
        let mut traj = vec![Vec::new(); nt + 1];
        if stage_shift {
            let factor = self.step_factor(grid, mu, nt)?;
            let rhs = self.e.apply_transpose(terminal);
            traj[nt] = factor.solve_transpose(&rhs);
        } else {
            traj[nt] = terminal.to_vec();
        }
        for k in (0..nt).rev() {
            let factor = self.step_factor(grid, mu, k)?;
            let rhs = self.e.apply_transpose(&traj[k + 1]);
            traj[k] = factor.solve_transpose(&rhs);
        }
        Ok(traj)
    }

    /// Φ(T,0)x: homogeneous forward propagation of x.
    pub fn apply_state_transition(&self, grid: &TimeGrid, mu: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let traj = self.integrate_primal(grid, mu, x, &[])?;
        Ok(traj.into_iter().next_back().unwrap())
    }

    /// u_k = −R(t_k)⁻¹ B(μ;t_k)ᵀ φ_k at the stage times t_1..t_nt.
    pub fn control_from_adjoint(&self, grid: &TimeGrid, mu: &[f64], phi: &Trajectory) -> Result<Vec<Vec<f64>>> {
        if phi.len() != grid.nt() + 1 {
            return Err(Error::DimensionMismatch {
                context: "control_from_adjoint (trajectory length)",
                expected: grid.nt() + 1,
                found: phi.len(),
            });
        }
        let mut u = Vec::with_capacity(grid.nt());
        for k in 1..=grid.nt() {
            let bt_phi = self.b.apply_transpose(mu, grid.node(k), &phi[k]);
            let mut uk = self.r.solve(k, &bt_phi)?;
            for v in &mut uk {
                *v = -*v;
            }
            u.push(uk);
        }
        Ok(u)
    }

    /// Output trajectory y_k = C x_k.
    pub fn outputs(&self, traj: &Trajectory) -> Vec<Vec<f64>> {
        traj.iter().map(|x| self.c.apply(x)).collect()
    }
}

/// CᵀC as a sparse matrix.
pub fn ata(c: &CsrMatrix) -> CsrMatrix {
    let mut triplets = Vec::new();
    for r in 0..c.rows() {
        let start = c.indptr()[r];
        let end = c.indptr()[r + 1];
        for i in start..end {
            for j in start..end {
                triplets.push((c.indices()[i], c.indices()[j], c.values()[i] * c.values()[j]));
            }
        }
    }
    CsrMatrix::from_triplets(c.cols(), c.cols(), &triplets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::space::InnerProductSpace;
    use rand::{Rng, SeedableRng};

    fn scalar_system(a_val: f64, b_val: f64) -> ControlSystem {
        let e = CsrMatrix::identity(1);
        let a = AffineOperator::constant(CsrMatrix::from_triplets(1, 1, &[(0, 0, a_val)]));
        let b = AffineOperator::constant(CsrMatrix::from_triplets(1, 1, &[(0, 0, b_val)]));
        let c = CsrMatrix::identity(1);
        ControlSystem::new(
            e,
            a,
            b,
            c,
            ControlWeight::scalar(0.02),
            InnerProductSpace::euclidean(1),
            AffineVector::zero(1),
            AffineVector::zero(1),
        )
        .unwrap()
    }

    fn random_dense_system(seed: u64, n: usize, m: usize, stable_shift: f64) -> ControlSystem {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        for i in 0..n {
            a[(i, i)] -= stable_shift;
        }
        let b = DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
        let c = DMatrix::from_fn(2.min(n), n, |_, _| rng.gen_range(-1.0..1.0));
        ControlSystem::new(
            CsrMatrix::identity(n),
            AffineOperator::constant(CsrMatrix::from_dense(&a, 0.0)),
            AffineOperator::constant(CsrMatrix::from_dense(&b, 0.0)),
            CsrMatrix::from_dense(&c, 0.0),
            ControlWeight::Constant(DMatrix::identity(m, m) * 0.5),
            InnerProductSpace::euclidean(n),
            AffineVector::zero(n),
            AffineVector::zero(n),
        )
        .unwrap()
    }

    #[test]
    fn homogeneous_zero_stays_zero() {
        let sys = scalar_system(-1.0, 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let traj = sys.integrate_primal(&grid, &[], &[0.0], &[]).unwrap();
        assert!(traj.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn scalar_decay_matches_closed_form_recursion() {
        // E = 1, A = −1, B = 0: x_nt = (1 + dt)^(−nt), the implicit Euler
        // approximation of e⁻¹.
        let sys = scalar_system(-1.0, 0.0);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let traj = sys.integrate_primal(&grid, &[], &[1.0], &[]).unwrap();
        let dt = grid.dt();
        let expect = (1.0 + dt).powi(-50);
        assert!((traj[50][0] - expect).abs() < 1e-14);
        assert!((traj[50][0] - (-1.0f64).exp()).abs() < 5e-3);
    }

    #[test]
    fn scalar_adjoint_closed_form() {
        let sys = scalar_system(-1.0, 0.0);
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let phi = sys.integrate_adjoint(&grid, &[], &[2.0]).unwrap();
        let dt = grid.dt();
        assert!((phi[0][0] - 2.0 * (1.0 + dt).powi(-50)).abs() < 1e-14);
        assert_eq!(phi[50][0], 2.0);
    }

    #[test]
    fn adjoint_stage_variant_shifts_one_step() {
        let sys = scalar_system(-1.0, 0.0);
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let dt = grid.dt();
        let phi = sys.integrate_adjoint_stages(&grid, &[], &[1.0]).unwrap();
        assert!((phi[10][0] - 1.0 / (1.0 + dt)).abs() < 1e-15);
        assert!((phi[0][0] - (1.0 + dt).powi(-11)).abs() < 1e-15);
    }

    #[test]
    fn zero_terminal_gives_zero_adjoint() {
        let sys = random_dense_system(1, 5, 1, 2.0);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let phi = sys.integrate_adjoint(&grid, &[], &[0.0; 5]).unwrap();
        assert!(phi.iter().all(|p| p.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn transition_is_linear() {
        let sys = random_dense_system(2, 6, 1, 2.0);
        let grid = TimeGrid::new(1.0, 9).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (al, be) = (1.3, -0.4);
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(a, b)| al * a + be * b).collect();
        let fx = sys.apply_state_transition(&grid, &[], &x).unwrap();
        let fy = sys.apply_state_transition(&grid, &[], &y).unwrap();
        let fm = sys.apply_state_transition(&grid, &[], &mixed).unwrap();
        let norm: f64 = fm.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..6 {
            assert!((fm[i] - (al * fx[i] + be * fy[i])).abs() <= 1e-12 * norm.max(1.0));
        }
    }

    #[test]
    fn transition_matches_dense_per_step_oracle() {
        let sys = random_dense_system(3, 6, 1, 2.0);
        let grid = TimeGrid::new(0.8, 7).unwrap();
        let dt = grid.dt();
        let n = 6;
        // dense product of per-step solve matrices
        let e = sys.e().to_dense();
        let mut phi = DMatrix::identity(n, n);
        for k in 1..=grid.nt() {
            let a = sys.a().assemble(&[], grid.node(k)).to_dense();
            let step = &e - &a * dt;
            let sk = step.lu().solve(&e).unwrap();
            phi = sk * phi;
        }
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(33);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = sys.apply_state_transition(&grid, &[], &x).unwrap();
        let want = &phi * nalgebra::DVector::from_column_slice(&x);
        for i in 0..n {
            assert!((got[i] - want[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn forward_backward_are_transposes_for_time_invariant_systems() {
        let sys = random_dense_system(4, 12, 2, 2.5);
        let grid = TimeGrid::new(1.0, 13).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fwd = sys.apply_state_transition(&grid, &[], &x).unwrap();
        let bwd = sys.integrate_adjoint(&grid, &[], &p).unwrap();
        let lhs: f64 = fwd.iter().zip(&p).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&bwd[0]).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn superposition_of_free_and_forced_response() {
        let sys = random_dense_system(5, 7, 2, 2.0);
        let grid = TimeGrid::new(1.0, 11).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(55);
        let x0: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<Vec<f64>> = (0..11)
            .map(|_| (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let full = sys.integrate_primal(&grid, &[], &x0, &u).unwrap();
        let free = sys.integrate_primal(&grid, &[], &x0, &[]).unwrap();
        let zero_u: Vec<Vec<f64>> = u.clone();
        let forced = sys.integrate_primal(&grid, &[], &[0.0; 7], &zero_u).unwrap();
        for k in 0..=11 {
            let norm: f64 = full[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..7 {
                assert!((full[k][i] - free[k][i] - forced[k][i]).abs() <= 1e-11 * norm.max(1.0));
            }
        }
    }

    #[test]
    fn factor_cache_returns_bitwise_identical_solves() {
        let sys = random_dense_system(6, 5, 1, 2.0);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let f1 = sys.step_factor(&grid, &[0.5, 2.0], 2).unwrap();
        let f2 = sys.step_factor(&grid, &[0.5, 2.0], 2).unwrap();
        assert!(Arc::ptr_eq(&f1, &f2));
        let rhs = vec![1.0, -0.5, 0.25, 2.0, 0.0];
        assert_eq!(f1.solve(&rhs), f2.solve(&rhs));
    }

    #[test]
    fn control_from_zero_adjoint_is_zero() {
        let sys = scalar_system(-1.0, 1.0);
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let phi = vec![vec![0.0]; 6];
        let u = sys.control_from_adjoint(&grid, &[], &phi).unwrap();
        assert!(u.iter().all(|uk| uk[0] == 0.0));
    }

    #[test]
    fn control_scaling_matches_weight() {
        // m = 1, R = 0.02, Bᵀφ_k = 1 => u_k = −50.
        let sys = scalar_system(-1.0, 1.0);
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let phi = vec![vec![1.0]; 4];
        let u = sys.control_from_adjoint(&grid, &[], &phi).unwrap();
        for uk in &u {
            assert!((uk[0] + 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn control_matches_dense_formula_stage_by_stage() {
        let sys = random_dense_system(7, 5, 2, 2.0);
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(21);
        let phi: Trajectory = (0..7)
            .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let u = sys.control_from_adjoint(&grid, &[], &phi).unwrap();
        let bd = sys.b().assemble(&[], 0.0).to_dense();
        let rinv = sys.r().at_stage(1).clone().try_inverse().unwrap();
        for k in 1..=6 {
            let want = -&rinv * bd.transpose() * nalgebra::DVector::from_column_slice(&phi[k]);
            for j in 0..2 {
                assert!((u[k - 1][j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_step_matrix_names_the_index() {
        // E − dt·A = 0 at every step for A = E/dt.
        let e = CsrMatrix::identity(2);
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let a = AffineOperator::constant(CsrMatrix::from_diagonal(&[1.0 / grid.dt(), 1.0 / grid.dt()]));
        let sys = ControlSystem::new(
            e,
            a,
            AffineOperator::constant(CsrMatrix::zeros(2, 1)),
            CsrMatrix::identity(2),
            ControlWeight::scalar(1.0),
            InnerProductSpace::euclidean(2),
            AffineVector::zero(2),
            AffineVector::zero(2),
        )
        .unwrap();
        match sys.integrate_primal(&grid, &[], &[1.0, 0.0], &[]) {
            Err(Error::SingularStep { time_index }) => assert_eq!(time_index, 1),
            other => panic!("expected singular step, got {other:?}"),
        }
    }

    #[test]
    fn affine_operator_matches_entrywise_sum() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let a0 = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let a1 = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let op = AffineOperator::new(
            vec![CsrMatrix::from_dense(&a0, 0.0), CsrMatrix::from_dense(&a1, 0.0)],
            vec![
                Theta::ShiftedQuadratic { scale: 14.0, center: 0.25, offset: 0.125 },
                Theta::Param { index: 0 },
            ],
        )
        .unwrap();
        let mu = [3.5];
        let t = 0.4;
        let w0 = 14.0 * (t - 0.25f64).powi(2) + 0.125;
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = (&a0 * w0 + &a1 * mu[0]) * nalgebra::DVector::from_column_slice(&x);
        let got = op.apply(&mu, t, &x);
        for i in 0..4 {
            assert!((got[i] - want[i]).abs() < 1e-13);
        }
        let assembled = op.assemble(&mu, t).to_dense();
        assert!((&assembled - (&a0 * w0 + &a1 * mu[0])).norm() < 1e-13);
    }
}
