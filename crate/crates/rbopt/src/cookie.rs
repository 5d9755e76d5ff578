//! The cookie baking benchmark: a heat equation on the unit square with
//! four circular "cookie" subdomains of parametrized conductivity, a
//! time-quadratic background conductivity, Neumann boundary control on the
//! left edge, homogeneous Dirichlet values on the right edge, and
//! subdomain-average outputs.
//!
//! Discretization: P1 finite elements on a structured criss-cross
//! triangulation (each grid cell split into four triangles through its
//! center). Elements belong to a cookie iff their centroid lies inside the
//! circle, so the circles are approximated piecewise by straight lines.
//! The Dirichlet condition is imposed by row/column elimination with the
//! mass diagonal kept, so E stays invertible and the free-dof block of E
//! coincides with the block of the untreated mass matrix G.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fom::{range_projection_residual, solve_fom, OptimalSolution};
use crate::linalg::csr::CsrMatrix;
use crate::linalg::io::write_matrix_market;
use crate::linalg::space::InnerProductSpace;
use crate::ltv::{AffineOperator, AffineVector, ControlSystem, ControlWeight, Theta, TimeGrid};

pub const PARAM_LO: f64 = 1e-1;
pub const PARAM_HI: f64 = 1e2;
pub const CONTROL_WEIGHT: f64 = 0.02;
pub const TARGET_VALUE: f64 = 0.25;
pub const COOKIE_RADIUS: f64 = 0.1;
pub const COOKIE_CENTERS: [(f64, f64); 4] = [(0.3, 0.3), (0.7, 0.3), (0.7, 0.7), (0.3, 0.7)];

/// Benchmark discretization parameters; the physics is fixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CookieConfig {
    /// Grid cells per side; at least 8 so every cookie contains elements.
    pub resolution: usize,
    pub nt: usize,
    pub t_final: f64,
}

impl Default for CookieConfig {
    fn default() -> Self {
        CookieConfig {
            resolution: 32,
            nt: 50,
            t_final: 1.0,
        }
    }
}

/// Assembled benchmark system with its time grid and a fingerprint of the
/// discrete data.
pub struct CookieSystem {
    pub system: ControlSystem,
    pub grid: TimeGrid,
    pub config: CookieConfig,
    pub fingerprint: String,
}

struct Mesh {
    n: usize,
    coords: Vec<(f64, f64)>,
    /// (vertex indices, subdomain 0..=4) per triangle.
    triangles: Vec<([usize; 3], usize)>,
    dirichlet: Vec<usize>,
    /// Boundary edges on Γ_in = {0}×[0,1].
    inflow_edges: Vec<(usize, usize)>,
}

fn build_mesh(res: usize) -> Mesh {
    let h = 1.0 / res as f64;
    let row = 2 * res + 1;
    let corner = |i: usize, j: usize| -> usize { j * row + i };
    let center = |i: usize, j: usize| -> usize { j * row + (res + 1) + i };
    let n = res * row + (res + 1);
    let mut coords = vec![(0.0, 0.0); n];
    for j in 0..=res {
        for i in 0..=res {
            coords[corner(i, j)] = (i as f64 * h, j as f64 * h);
        }
        if j < res {
            for i in 0..res {
                coords[center(i, j)] = ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h);
            }
        }
    }
    let subdomain_of = |centroid: (f64, f64)| -> usize {
        for (s, &(cx, cy)) in COOKIE_CENTERS.iter().enumerate() {
            let (dx, dy) = (centroid.0 - cx, centroid.1 - cy);
            if (dx * dx + dy * dy).sqrt() < COOKIE_RADIUS {
                return s + 1;
            }
        }
        0
    };
    let mut triangles = Vec::with_capacity(4 * res * res);
    for j in 0..res {
        for i in 0..res {
            let c00 = corner(i, j);
            let c10 = corner(i + 1, j);
            let c11 = corner(i + 1, j + 1);
            let c01 = corner(i, j + 1);
            let m = center(i, j);
            for tri in [[c00, c10, m], [c10, c11, m], [c11, c01, m], [c01, c00, m]] {
                let cx = (coords[tri[0]].0 + coords[tri[1]].0 + coords[tri[2]].0) / 3.0;
                let cy = (coords[tri[0]].1 + coords[tri[1]].1 + coords[tri[2]].1) / 3.0;
                triangles.push((tri, subdomain_of((cx, cy))));
            }
        }
    }
    let dirichlet = (0..=res).map(|j| corner(res, j)).collect();
    let inflow_edges = (0..res).map(|j| (corner(0, j), corner(0, j + 1))).collect();
    Mesh {
        n,
        coords,
        triangles,
        dirichlet,
        inflow_edges,
    }
}

fn triangle_area(p: [(f64, f64); 3]) -> f64 {
    0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs()
}

/// Assemble the benchmark control system.
pub fn assemble_cookie(cfg: &CookieConfig) -> Result<CookieSystem> {
    if cfg.resolution < 8 {
        return Err(Error::InvalidConfig(format!(
            "cookie resolution {} too coarse: every cookie needs interior elements (resolution >= 8)",
            cfg.resolution
        )));
    }
    let mesh = build_mesh(cfg.resolution);
    let n = mesh.n;
    let mut mass_triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut stiff_triplets: [Vec<(usize, usize, f64)>; 5] = Default::default();
    let mut areas = [0.0f64; 5];
    let mut c_accum = vec![[0.0f64; 4]; n];

    for &(tri, sub) in &mesh.triangles {
        let p = [mesh.coords[tri[0]], mesh.coords[tri[1]], mesh.coords[tri[2]]];
        let area = triangle_area(p);
        areas[sub] += area;
        // P1 gradients: ∇λ_a = (b_a, c_a) / (2A)
        let b = [p[1].1 - p[2].1, p[2].1 - p[0].1, p[0].1 - p[1].1];
        let c = [p[2].0 - p[1].0, p[0].0 - p[2].0, p[1].0 - p[0].0];
        for a in 0..3 {
            for bb in 0..3 {
                let k = (b[a] * b[bb] + c[a] * c[bb]) / (4.0 * area);
                stiff_triplets[sub].push((tri[a], tri[bb], k));
                let m = if a == bb { area / 6.0 } else { area / 12.0 };
                mass_triplets.push((tri[a], tri[bb], m));
            }
            if sub >= 1 {
                c_accum[tri[a]][sub - 1] += area / 3.0;
            }
        }
    }

    let mass = CsrMatrix::from_triplets(n, n, &mass_triplets);
    let mass_diag: Vec<f64> = {
        let mut d = vec![0.0; n];
        for (r, c, v) in mass.triplets() {
            if r == c {
                d[r] += v;
            }
        }
        d
    };
    let mut is_dirichlet = vec![false; n];
    for &d in &mesh.dirichlet {
        is_dirichlet[d] = true;
    }

    // E: mass with Dirichlet rows/columns eliminated, diagonal kept at the
    // mass scale; G: untreated mass.
    let mut e_triplets = Vec::with_capacity(mass.nnz());
    for (r, c, v) in mass.triplets() {
        if is_dirichlet[r] || is_dirichlet[c] {
            continue;
        }
        e_triplets.push((r, c, v));
    }
    for &d in &mesh.dirichlet {
        e_triplets.push((d, d, mass_diag[d]));
    }
    let e = CsrMatrix::from_triplets(n, n, &e_triplets);

    // A_q: negative stiffness with Dirichlet rows/columns fully zeroed.
    let eliminate = |triplets: &[(usize, usize, f64)]| -> CsrMatrix {
        let kept: Vec<(usize, usize, f64)> = triplets
            .iter()
            .filter(|(r, c, _)| !is_dirichlet[*r] && !is_dirichlet[*c])
            .map(|&(r, c, v)| (r, c, -v))
            .collect();
        CsrMatrix::from_triplets(n, n, &kept)
    };
    let a0 = eliminate(&stiff_triplets[0]);
    let a13 = eliminate(
        &stiff_triplets[1]
            .iter()
            .chain(stiff_triplets[3].iter())
            .copied()
            .collect::<Vec<_>>(),
    );
    let a24 = eliminate(
        &stiff_triplets[2]
            .iter()
            .chain(stiff_triplets[4].iter())
            .copied()
            .collect::<Vec<_>>(),
    );
    let a = AffineOperator::new(
        vec![a0, a13, a24],
        vec![
            // background conductivity q(t) = 14 (t − 0.25)² + 0.125
            Theta::ShiftedQuadratic {
                scale: 14.0,
                center: 0.25,
                offset: 0.125,
            },
            Theta::Param { index: 0 },
            Theta::Param { index: 1 },
        ],
    )?;

    // Neumann trace on the inflow boundary, one scalar control.
    let mut b_triplets = Vec::new();
    for &(v0, v1) in &mesh.inflow_edges {
        let len = ((mesh.coords[v0].0 - mesh.coords[v1].0).powi(2)
            + (mesh.coords[v0].1 - mesh.coords[v1].1).powi(2))
        .sqrt();
        for v in [v0, v1] {
            if !is_dirichlet[v] {
                b_triplets.push((v, 0, 0.5 * len));
            }
        }
    }
    let b = AffineOperator::new(
        vec![CsrMatrix::from_triplets(n, 1, &b_triplets)],
        vec![Theta::Const(1.0)],
    )?;

    // subdomain averages; the discrete areas make C·1 = 1 exact
    let mut c_triplets = Vec::new();
    for (v, acc) in c_accum.iter().enumerate() {
        for s in 0..4 {
            if acc[s] != 0.0 {
                c_triplets.push((s, v, acc[s] / areas[s + 1]));
            }
        }
    }
    let c = CsrMatrix::from_triplets(4, n, &c_triplets);

    let space = InnerProductSpace::new(mass.clone())?;
    let x0 = AffineVector::zero(n);
    let xt = AffineVector::constant(vec![TARGET_VALUE; n]);
    let grid = TimeGrid::new(cfg.t_final, cfg.nt)?;
    let system = ControlSystem::new(
        e,
        a,
        b,
        c,
        ControlWeight::scalar(CONTROL_WEIGHT),
        space,
        x0,
        xt,
    )?;
    let fingerprint = fingerprint_system(&system, cfg);
    Ok(CookieSystem {
        system,
        grid,
        config: cfg.clone(),
        fingerprint,
    })
}

fn hash_matrix(hasher: &mut Sha256, m: &CsrMatrix) {
    hasher.update(m.rows().to_le_bytes());
    hasher.update(m.cols().to_le_bytes());
    for (r, c, v) in m.triplets() {
        hasher.update(r.to_le_bytes());
        hasher.update(c.to_le_bytes());
        hasher.update(v.to_le_bytes());
    }
}

/// SHA-256 of the assembled discrete data; archives carry it so evaluation
/// refuses to run against a different system.
pub fn fingerprint_system(sys: &ControlSystem, cfg: &CookieConfig) -> String {
    let mut h = Sha256::new();
    h.update(cfg.resolution.to_le_bytes());
    h.update(cfg.nt.to_le_bytes());
    h.update(cfg.t_final.to_le_bytes());
    hash_matrix(&mut h, sys.e());
    for q in 0..sys.a().num_terms() {
        hash_matrix(&mut h, sys.a().component(q));
    }
    for q in 0..sys.b().num_terms() {
        hash_matrix(&mut h, sys.b().component(q));
    }
    hash_matrix(&mut h, sys.c());
    hash_matrix(&mut h, sys.space().gram());
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Log-uniform tensor grid over the parameter box with `per_dim` points per
/// direction (deterministic row-major order).
pub fn log_uniform_grid(per_dim: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..per_dim)
        .map(|i| {
            let t = if per_dim == 1 { 0.5 } else { i as f64 / (per_dim - 1) as f64 };
            PARAM_LO * (PARAM_HI / PARAM_LO).powf(t)
        })
        .collect();
    let mut out = Vec::with_capacity(per_dim * per_dim);
    for a in &axis {
        for b in &axis {
            out.push(vec![*a, *b]);
        }
    }
    out
}

/// Seeded log-uniform random parameters in the box.
pub fn log_uniform_random(count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            (0..2)
                .map(|_| {
                    let t: f64 = rng.gen_range(0.0..1.0);
                    PARAM_LO * (PARAM_HI / PARAM_LO).powf(t)
                })
                .collect()
        })
        .collect()
}

/// Write the assembled operators as a Matrix Market bundle with a JSON
/// manifest, consumable by other tools.
pub fn export_bundle(dir: &Path, cookie: &CookieSystem) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let sys = &cookie.system;
    write_matrix_market(&dir.join("e.mtx"), sys.e())?;
    write_matrix_market(&dir.join("g.mtx"), sys.space().gram())?;
    for q in 0..sys.a().num_terms() {
        write_matrix_market(&dir.join(format!("a{q}.mtx")), sys.a().component(q))?;
    }
    write_matrix_market(&dir.join("b0.mtx"), sys.b().component(0))?;
    write_matrix_market(&dir.join("c.mtx"), sys.c())?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        benchmark: &'static str,
        resolution: usize,
        nt: usize,
        t_final: f64,
        n: usize,
        num_controls: usize,
        num_outputs: usize,
        q_a: usize,
        q_b: usize,
        theta_a: &'a [Theta],
        control_weight: f64,
        target_value: f64,
        parameter_box: [[f64; 2]; 2],
        fingerprint: &'a str,
        files: Vec<String>,
    }
    let files = {
        let mut f = vec!["e.mtx".to_string(), "g.mtx".into(), "b0.mtx".into(), "c.mtx".into()];
        for q in 0..sys.a().num_terms() {
            f.push(format!("a{q}.mtx"));
        }
        f
    };
    let manifest = Manifest {
        benchmark: "cookie",
        resolution: cookie.config.resolution,
        nt: cookie.config.nt,
        t_final: cookie.config.t_final,
        n: sys.n(),
        num_controls: sys.num_controls(),
        num_outputs: sys.num_outputs(),
        q_a: sys.a().num_terms(),
        q_b: sys.b().num_terms(),
        theta_a: sys.a().coefficients(),
        control_weight: CONTROL_WEIGHT,
        target_value: TARGET_VALUE,
        parameter_box: [[PARAM_LO, PARAM_HI], [PARAM_LO, PARAM_HI]],
        fingerprint: &cookie.fingerprint,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Qualitative reference checks of the controlled solution at μ = (100, 0.1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub mu: Vec<f64>,
    pub y_final: [f64; 4],
    /// y₁(T) and y₄(T) within [0.2, 0.3].
    pub outer_cookies_near_target: bool,
    /// y₂(T) below 0.15 (low conductivity keeps Ω₂ cold).
    pub second_cookie_cold: bool,
    /// Mirror symmetry of outputs for a symmetric parameter.
    pub symmetry_ok: bool,
    pub symmetry_rel_dev: f64,
    /// Relative G-norm residual of φ_T against range((Eᵀ)⁻¹M).
    pub image_residual: f64,
    pub objective: f64,
    /// Control trajectory at the stage times (for plotting).
    pub control_series: Vec<f64>,
    /// Output components over all grid nodes.
    pub output_series: Vec<[f64; 4]>,
}

/// Solve the benchmark at μ = (100, 0.1) and check the qualitative
/// behavior reported for the problem; assertion failures are reported in
/// the returned struct, not raised.
pub fn reference_behavior_check(cookie: &CookieSystem) -> Result<ReferenceReport> {
    let sys = &cookie.system;
    let grid = &cookie.grid;
    let mu = vec![100.0, 0.1];
    let sol: OptimalSolution = solve_fom(sys, grid, &mu, 1e-8)?;
    let outputs = sys.outputs(&sol.x);
    let last = &outputs[grid.nt()];
    let y_final = [last[0], last[1], last[2], last[3]];
    let outer = (0.2..=0.3).contains(&y_final[0]) && (0.2..=0.3).contains(&y_final[3]);
    let cold = y_final[1] < 0.15;

    // symmetric parameter: outputs mirror about the horizontal midline
    let mu_sym = vec![5.0, 5.0];
    let sol_sym = solve_fom(sys, grid, &mu_sym, 1e-8)?;
    let y_sym = &sys.outputs(&sol_sym.x)[grid.nt()];
    let dev14 = (y_sym[0] - y_sym[3]).abs() / y_sym[0].abs().max(1e-12);
    let dev23 = (y_sym[1] - y_sym[2]).abs() / y_sym[1].abs().max(1e-12);
    let symmetry_rel_dev = dev14.max(dev23);
    let symmetry_ok = symmetry_rel_dev < 0.02;

    let image_residual = range_projection_residual(sys, &sol.phi_t)?;

    Ok(ReferenceReport {
        mu,
        y_final,
        outer_cookies_near_target: outer,
        second_cookie_cold: cold,
        symmetry_ok,
        symmetry_rel_dev,
        image_residual,
        objective: sol.objective,
        control_series: sol.u.iter().map(|u| u[0]).collect(),
        output_series: outputs
            .iter()
            .map(|y| [y[0], y[1], y[2], y[3]])
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_too_coarse_grids() {
        assert!(assemble_cookie(&CookieConfig {
            resolution: 4,
            nt: 10,
            t_final: 1.0
        })
        .is_err());
    }

    #[test]
    fn dimensions_and_affine_structure() {
        let cookie = assemble_cookie(&CookieConfig {
            resolution: 8,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        let sys = &cookie.system;
        assert_eq!(sys.n(), 9 * 9 + 8 * 8);
        assert_eq!(sys.a().num_terms(), 3);
        assert_eq!(sys.b().num_terms(), 1);
        assert_eq!(sys.x0().num_terms(), 1);
        assert_eq!(sys.xt().num_terms(), 1);
        assert_eq!(sys.num_outputs(), 4);
        // q(0) = 1, q(0.25) = 0.125 (the minimum)
        let q = sys.a().coefficient(0);
        assert!((q.eval(&[], 0.0) - 1.0).abs() < 1e-15);
        assert!((q.eval(&[], 0.25) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn averaging_rows_form_partition_of_unity() {
        let cookie = assemble_cookie(&CookieConfig {
            resolution: 8,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        let ones = vec![1.0; cookie.system.n()];
        let y = cookie.system.c().apply(&ones);
        for v in y {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stiffness_blocks_partition_the_domain() {
        // Σ_i A_i with unit coefficients equals the uniform-conductivity
        // operator: A(μ = (1,1); t with q = 1) on random probes.
        let cookie = assemble_cookie(&CookieConfig {
            resolution: 8,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        let sys = &cookie.system;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let n = sys.n();
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // q(0) = 1 so A((1,1); 0) = A_0 + A_13 + A_24
        let combined = sys.a().apply(&[1.0, 1.0], 0.0, &x);
        let mut direct = vec![0.0; n];
        for q in 0..3 {
            let y = sys.a().component(q).apply(&x);
            for i in 0..n {
                direct[i] += y[i];
            }
        }
        for i in 0..n {
            assert!((combined[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn operators_are_negative_definite_on_free_dofs() {
        let cookie = assemble_cookie(&CookieConfig {
            resolution: 8,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        let sys = &cookie.system;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let n = sys.n();
        let row = 2 * 8 + 1;
        let corner = |i: usize, j: usize| j * row + i;
        let dirichlet: Vec<usize> = (0..=8).map(|j| corner(8, j)).collect();
        for &(m1, m2) in &[(PARAM_LO, PARAM_LO), (PARAM_HI, PARAM_LO), (PARAM_HI, PARAM_HI)] {
            for &t in &[0.0, 0.25, 1.0] {
                let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                for &d in &dirichlet {
                    x[d] = 0.0;
                }
                let ax = sys.a().apply(&[m1, m2], t, &x);
                let quad: f64 = x.iter().zip(&ax).map(|(a, b)| a * b).sum();
                assert!(quad < 0.0, "A(μ;t) not negative definite at ({m1},{m2},{t})");
            }
        }
        // mass matrices SPD on random probes
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gx = sys.space().gram().apply(&x);
        assert!(x.iter().zip(&gx).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        let ex = sys.e().apply(&x);
        assert!(x.iter().zip(&ex).map(|(a, b)| a * b).sum::<f64>() > 0.0);
        assert_eq!(sys.e().asymmetry(), 0.0);
        assert_eq!(sys.space().gram().asymmetry(), 0.0);
    }

    #[test]
    fn neumann_trace_sums_to_boundary_length() {
        let cookie = assemble_cookie(&CookieConfig {
            resolution: 8,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        let b = cookie.system.b().component(0);
        let total: f64 = b.values().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fingerprints_are_stable_and_sensitive() {
        let c1 = assemble_cookie(&CookieConfig {
            resolution: 8,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        let c2 = assemble_cookie(&CookieConfig {
            resolution: 8,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        assert_eq!(c1.fingerprint, c2.fingerprint);
        let c3 = assemble_cookie(&CookieConfig {
            resolution: 10,
            nt: 10,
            t_final: 1.0,
        })
        .unwrap();
        assert_ne!(c1.fingerprint, c3.fingerprint);
    }

    #[test]
    fn log_uniform_grid_spans_the_box() {
        let g = log_uniform_grid(5);
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], vec![PARAM_LO, PARAM_LO]);
        assert_eq!(g[24], vec![PARAM_HI, PARAM_HI]);
        let r = log_uniform_random(7, 11);
        assert_eq!(r, log_uniform_random(7, 11));
        for mu in &r {
            assert!(mu.iter().all(|v| (PARAM_LO..=PARAM_HI).contains(v)));
        }
    }
}
