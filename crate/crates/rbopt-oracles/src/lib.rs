//! Dense brute-force oracles for the rbopt test suites.
//!
//! Everything here materializes full matrices and uses direct dense solves,
//! independent of the matrix-free paths it is used to verify. Size guards
//! keep these routines away from full-order work; they exist only for
//! correctness checks and are never imported by non-test code.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use rbopt::linalg::csr::CsrMatrix;
use rbopt::linalg::space::InnerProductSpace;
use rbopt::ltv::{AffineOperator, AffineVector, ControlSystem, ControlWeight, Theta, TimeGrid};

pub const MAX_N: usize = 300;
pub const MAX_NT: usize = 60;

/// Fully materialized dense copy of a control system at one parameter.
pub struct DenseProblem {
    pub n: usize,
    pub m_in: usize,
    pub nt: usize,
    pub dt: f64,
    pub e: DMatrix<f64>,
    /// A(μ; t_k) for k = 0..=nt.
    pub a_k: Vec<DMatrix<f64>>,
    /// B(μ; t_k) for k = 0..=nt.
    pub b_k: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// R(t_k) for stages k = 1..=nt.
    pub r_k: Vec<DMatrix<f64>>,
    pub x0: DVector<f64>,
    pub xt: DVector<f64>,
}

impl DenseProblem {
    pub fn from_system(sys: &ControlSystem, grid: &TimeGrid, mu: &[f64]) -> Self {
        assert!(sys.n() <= MAX_N, "dense oracle refuses n = {} > {}", sys.n(), MAX_N);
        assert!(grid.nt() <= MAX_NT, "dense oracle refuses nt = {} > {}", grid.nt(), MAX_NT);
        let nt = grid.nt();
        let a_k = (0..=nt).map(|k| sys.a().assemble(mu, grid.node(k)).to_dense()).collect();
        let b_k = (0..=nt).map(|k| sys.b().assemble(mu, grid.node(k)).to_dense()).collect();
        let r_k = (1..=nt).map(|k| sys.r().at_stage(k).clone()).collect();
        DenseProblem {
            n: sys.n(),
            m_in: sys.num_controls(),
            nt,
            dt: grid.dt(),
            e: sys.e().to_dense(),
            a_k,
            b_k,
            c: sys.c().to_dense(),
            m: sys.m().to_dense(),
            g: sys.space().gram().to_dense(),
            r_k,
            x0: DVector::from_vec(sys.x0().evaluate(mu)),
            xt: DVector::from_vec(sys.xt().evaluate(mu)),
        }
    }

    fn step_matrix(&self, k: usize) -> DMatrix<f64> {
        &self.e - &self.a_k[k] * self.dt
    }

    /// Φ(T, 0) as a dense matrix (product of per-step solve matrices).
    pub fn dense_state_transition(&self) -> DMatrix<f64> {
        let mut phi = DMatrix::identity(self.n, self.n);
        for k in 1..=self.nt {
            let lu = self.step_matrix(k).lu();
            let mut sk = self.e.clone();
            for j in 0..self.n {
                let col = lu.solve(&DVector::from(self.e.column(j))).expect("step invertible");
                sk.set_column(j, &col);
            }
            phi = sk * phi;
        }
        phi
    }

    /// D_k = T_nt ⋯ T_{k+1} (E − dt·A_k)⁻¹ for k = 1..=nt; the impulse
    /// response factors of the discrete chain.
    fn impulse_factors(&self) -> Vec<DMatrix<f64>> {
        let eye = DMatrix::identity(self.n, self.n);
        let mut d = vec![DMatrix::zeros(0, 0); self.nt + 1];
        let mut p = eye.clone();
        for k in (1..=self.nt).rev() {
            let lu = self.step_matrix(k).lu();
            let mut inv_step = eye.clone();
            for j in 0..self.n {
                let col = lu.solve(&DVector::from(eye.column(j))).expect("step invertible");
                inv_step.set_column(j, &col);
            }
            d[k] = &p * inv_step;
            p = &d[k] * &self.e;
        }
        d
    }

    /// Gramian column by column: chain applied to the canonical basis.
    pub fn dense_gramian(&self) -> DMatrix<f64> {
        let mut gr = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            let mut p = DVector::zeros(self.n);
            p[j] = 1.0;
            let col = self.apply_gramian_chain(&p);
            gr.set_column(j, &col);
        }
        gr
    }

    /// The same chain as the matrix-free Gramian, in dense arithmetic.
    pub fn apply_gramian_chain(&self, p: &DVector<f64>) -> DVector<f64> {
        let chi = self.adjoint_stages(p);
        let u: Vec<DVector<f64>> = (1..=self.nt)
            .map(|k| {
                let bt_phi = self.b_k[k].transpose() * &chi[k];
                -self.r_k[k - 1].clone().lu().solve(&bt_phi).expect("R invertible")
            })
            .collect();
        let x = self.integrate_primal_dense(&DVector::zeros(self.n), &u);
        -&x[self.nt]
    }

    /// Quadrature-form Gramian: (dt·Σ_k D_k B_k R_k⁻¹ B_kᵀ D_kᵀ)·Eᵀ.
    ///
    /// The stage adjoints satisfy χ_k = D_kᵀ Eᵀ p, so the symmetric PSD sum
    /// is composed with Eᵀ; for E = I the Gramian itself is symmetric.
    pub fn dense_gramian_quadrature(&self) -> DMatrix<f64> {
        let d = self.impulse_factors();
        let mut w = DMatrix::zeros(self.n, self.n);
        for k in 1..=self.nt {
            let lu = self.r_k[k - 1].clone().lu();
            let bt = self.b_k[k].transpose();
            let mut rinv_bt = DMatrix::zeros(self.m_in, self.n);
            for j in 0..self.n {
                let col = lu.solve(&DVector::from(bt.column(j))).expect("R invertible");
                rinv_bt.set_column(j, &col);
            }
            let dkb = &d[k] * &self.b_k[k];
            w += dkb * rinv_bt * d[k].transpose() * self.dt;
        }
        w * self.e.transpose()
    }

    /// Stage adjoints from a terminal datum (discrete optimality chain).
    pub fn adjoint_stages(&self, p: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut chi = vec![DVector::zeros(self.n); self.nt + 1];
        let et = self.e.transpose();
        let mut prev = p.clone();
        for k in (0..=self.nt).rev() {
            let rhs = &et * &prev;
            chi[k] = self.step_matrix(k).transpose().lu().solve(&rhs).expect("step invertible");
            prev = chi[k].clone();
        }
        chi
    }

    pub fn integrate_primal_dense(&self, x_init: &DVector<f64>, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut traj = Vec::with_capacity(self.nt + 1);
        traj.push(x_init.clone());
        for k in 1..=self.nt {
            let mut rhs = &self.e * &traj[k - 1];
            if !u.is_empty() {
                rhs += &self.b_k[k] * &u[k - 1] * self.dt;
            }
            traj.push(self.step_matrix(k).lu().solve(&rhs).expect("step invertible"));
        }
        traj
    }

    /// Minimize the discrete quadratic objective over the stacked control
    /// vector via dense normal equations; independent of the
    /// optimality-system route. Returns (per-stage controls, state
    /// trajectory, final-time adjoint from the terminal condition).
    pub fn dense_optimal_control(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>, DVector<f64>) {
        let (n, m, nt) = (self.n, self.m_in, self.nt);
        let d = self.impulse_factors();
        // x(T) = Φ x0 + T_mat u,   T_mat[:, block k] = dt · D_k B_k
        let mut t_mat = DMatrix::zeros(n, nt * m);
        for k in 1..=nt {
            let block = &d[k] * &self.b_k[k] * self.dt;
            t_mat.view_mut((0, (k - 1) * m), (n, m)).copy_from(&block);
        }
        let phi_x0 = self.dense_state_transition() * &self.x0;
        let f = &phi_x0 - &self.xt;
        let mut normal = t_mat.transpose() * &self.m * &t_mat;
        for k in 0..nt {
            for i in 0..m {
                for j in 0..m {
                    normal[(k * m + i, k * m + j)] += self.dt * self.r_k[k][(i, j)];
                }
            }
        }
        let rhs = -(t_mat.transpose() * &self.m * &f);
        let u_stacked = normal.lu().solve(&rhs).expect("SPD normal equations");
        let u: Vec<DVector<f64>> = (0..nt)
            .map(|k| DVector::from_iterator(m, (0..m).map(|i| u_stacked[k * m + i])))
            .collect();
        let x = self.integrate_primal_dense(&self.x0, &u);
        let m_diff = &self.m * (&x[nt] - &self.xt);
        let phi_t = self.e.transpose().lu().solve(&m_diff).expect("E invertible");
        (u, x, phi_t)
    }

    /// Assemble G_μ densely and solve (Eᵀ + M G_μ) φT = M(Φ x0 − xT) directly.
    pub fn dense_fta_all_at_once(&self) -> DVector<f64> {
        let gr = self.dense_gramian();
        let op = self.e.transpose() + &self.m * gr;
        let rhs = &self.m * (self.dense_state_transition() * &self.x0 - &self.xt);
        op.lu().solve(&rhs).expect("FTA operator invertible")
    }

    /// ‖E⁻¹(A_k V x̂ + B_k u − E V ẋ̂)‖_G evaluated at full order, no
    /// decomposition: the direct counterpart of the offline-online primal
    /// residual norm.
    pub fn dense_primal_residual_norm(
        &self,
        v: &DMatrix<f64>,
        xhat: &DVector<f64>,
        xhat_dot: &DVector<f64>,
        u: &DVector<f64>,
        k: usize,
    ) -> f64 {
        let lifted = v * xhat;
        let lifted_dot = v * xhat_dot;
        let resid = &self.a_k[k] * lifted + &self.b_k[k] * u - &self.e * lifted_dot;
        let einv_r = self.e.clone().lu().solve(&resid).expect("E invertible");
        (einv_r.transpose() * &self.g * &einv_r)[(0, 0)].max(0.0).sqrt()
    }

    /// ‖E⁻ᵀ(A_kᵀ V φ̂ + Eᵀ V φ̇̂)‖_G at full order (adjoint residual).
    pub fn dense_adjoint_residual_norm(
        &self,
        v: &DMatrix<f64>,
        phihat: &DVector<f64>,
        phihat_dot: &DVector<f64>,
        k: usize,
    ) -> f64 {
        let lifted = v * phihat;
        let lifted_dot = v * phihat_dot;
        let resid = self.a_k[k].transpose() * lifted + self.e.transpose() * lifted_dot;
        let einv_r = self.e.transpose().lu().solve(&resid).expect("E invertible");
        (einv_r.transpose() * &self.g * &einv_r)[(0, 0)].max(0.0).sqrt()
    }

    /// Condition number of (Eᵀ + M G_μ) in the G operator norm.
    pub fn dense_fta_condition_number(&self) -> f64 {
        let op = self.e.transpose() + &self.m * self.dense_gramian();
        let g_half = sym_sqrt(&self.g);
        let g_half_inv = invert(&g_half);
        let sim = &g_half * &op * &g_half_inv;
        let svd = sim.svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        smax / smin
    }

    /// G operator norm ‖G^{1/2} K G^{-1/2}‖₂ of a dense map K.
    pub fn g_operator_norm(&self, k_map: &DMatrix<f64>) -> f64 {
        let g_half = sym_sqrt(&self.g);
        let g_half_inv = invert(&g_half);
        let sim = &g_half * k_map * &g_half_inv;
        sim.svd(false, false).singular_values.max()
    }
}

pub fn invert(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

/// Symmetric square root of an SPD matrix.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut d = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        d[(i, i)] = eig.eigenvalues[i].max(0.0).sqrt();
    }
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Configuration for randomized parameter-separable test systems.
#[derive(Debug, Clone)]
pub struct RandomSystemConfig {
    pub seed: u64,
    pub n: usize,
    pub m_controls: usize,
    pub s_outputs: usize,
    pub time_varying: bool,
    /// Non-identity SPD E and diagonal G when set.
    pub general_metrics: bool,
    pub stable_shift: f64,
    pub r_scale: f64,
}

impl Default for RandomSystemConfig {
    fn default() -> Self {
        RandomSystemConfig {
            seed: 0,
            n: 8,
            m_controls: 1,
            s_outputs: 2,
            time_varying: true,
            general_metrics: true,
            stable_shift: 2.0,
            r_scale: 0.1,
        }
    }
}

/// A random stable parameter-separable system with one scalar parameter
/// entering the drift: A(μ;t) = A_base + q(t)·A_t + μ·A_mu.
pub fn random_system(cfg: &RandomSystemConfig) -> ControlSystem {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let mut a_base = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    for i in 0..n {
        a_base[(i, i)] -= cfg.stable_shift + 1.0;
    }
    let a_mu = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -rng.gen_range(0.1..0.6)
        } else {
            rng.gen_range(-0.2..0.2)
        }
    });
    let mut components = vec![CsrMatrix::from_dense(&a_base, 0.0)];
    let mut coefficients = vec![Theta::Const(1.0)];
    if cfg.time_varying {
        let a_t = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                -rng.gen_range(0.1..0.5)
            } else {
                rng.gen_range(-0.15..0.15)
            }
        });
        components.push(CsrMatrix::from_dense(&a_t, 0.0));
        coefficients.push(Theta::ShiftedQuadratic {
            scale: 1.5,
            center: 0.3,
            offset: 0.2,
        });
    }
    components.push(CsrMatrix::from_dense(&a_mu, 0.0));
    coefficients.push(Theta::Param { index: 0 });
    let a = AffineOperator::new(components, coefficients).unwrap();

    let b_mat = DMatrix::from_fn(n, cfg.m_controls, |_, _| rng.gen_range(-1.0..1.0));
    let b = AffineOperator::constant(CsrMatrix::from_dense(&b_mat, 0.0));
    let c_mat = DMatrix::from_fn(cfg.s_outputs, n, |_, _| rng.gen_range(-1.0..1.0));

    let (e, g) = if cfg.general_metrics {
        let w = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.2..0.2));
        let e = DMatrix::identity(n, n) + &w * w.transpose();
        let gdiag: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        (CsrMatrix::from_dense(&e, 1e-300), CsrMatrix::from_diagonal(&gdiag))
    } else {
        (CsrMatrix::identity(n), CsrMatrix::identity(n))
    };

    let mut r = DMatrix::from_fn(cfg.m_controls, cfg.m_controls, |_, _| rng.gen_range(-0.1..0.1));
    r = &r * r.transpose() + DMatrix::identity(cfg.m_controls, cfg.m_controls) * cfg.r_scale;

    let x0: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let xt: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();

    ControlSystem::new(
        e,
        a,
        b,
        CsrMatrix::from_dense(&c_mat, 0.0),
        ControlWeight::Constant(r),
        InnerProductSpace::new(g).unwrap(),
        AffineVector::new(vec![x0], vec![Theta::Const(1.0)]).unwrap(),
        AffineVector::new(vec![xt], vec![Theta::Const(1.0)]).unwrap(),
    )
    .unwrap()
}

/// A random parameter in [lo, hi]^dim drawn log-uniformly.
pub fn random_log_uniform(rng: &mut ChaCha12Rng, lo: f64, hi: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let t = rng.gen_range(0.0..1.0);
            lo * (hi / lo).powf(t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_problem_matches_sparse_on_random_probes() {
        let sys = random_system(&RandomSystemConfig::default());
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mu = [0.7];
        let dp = DenseProblem::from_system(&sys, &grid, &mu);
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let x: Vec<f64> = (0..sys.n()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xd = DVector::from_column_slice(&x);
        for k in [0usize, 3, 10] {
            let sparse = sys.a().apply(&mu, grid.node(k), &x);
            let dense = &dp.a_k[k] * &xd;
            for i in 0..sys.n() {
                assert!((sparse[i] - dense[i]).abs() < 1e-13);
            }
        }
        let es = sys.e().apply(&x);
        let ed = &dp.e * &xd;
        for i in 0..sys.n() {
            assert!((es[i] - ed[i]).abs() < 1e-13);
        }
    }

    #[test]
    fn gramian_routes_agree() {
        // Column assembly of the chain vs the quadrature form: two
        // constructions of the same operator.
        let sys = random_system(&RandomSystemConfig {
            seed: 5,
            ..Default::default()
        });
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let dp = DenseProblem::from_system(&sys, &grid, &[1.3]);
        let g1 = dp.dense_gramian();
        let g2 = dp.dense_gramian_quadrature();
        let scale = g1.norm().max(1e-30);
        assert!((&g1 - &g2).norm() / scale < 1e-10, "{}", (&g1 - &g2).norm() / scale);
    }

    #[test]
    fn gramian_is_zero_without_actuation() {
        let cfg = RandomSystemConfig {
            seed: 6,
            ..Default::default()
        };
        let sys = random_system(&cfg);
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let mut dp = DenseProblem::from_system(&sys, &grid, &[0.4]);
        for bk in &mut dp.b_k {
            bk.fill(0.0);
        }
        assert!(dp.dense_gramian().norm() == 0.0);
    }

    #[test]
    fn optimal_control_agrees_with_all_at_once_fta() {
        // Two independent oracle routes: stacked normal equations vs the
        // dense final-time-adjoint linear system.
        for seed in 0..5 {
            let sys = random_system(&RandomSystemConfig {
                seed,
                n: 7,
                ..Default::default()
            });
            let grid = TimeGrid::new(1.0, 9).unwrap();
            let dp = DenseProblem::from_system(&sys, &grid, &[0.9]);
            let (_, _, phi_t_a) = dp.dense_optimal_control();
            let phi_t_b = dp.dense_fta_all_at_once();
            let scale = phi_t_b.norm().max(1e-30);
            assert!(
                (&phi_t_a - &phi_t_b).norm() / scale < 1e-9,
                "seed {seed}: {}",
                (&phi_t_a - &phi_t_b).norm() / scale
            );
        }
    }
}
