//! The five reduced-model construction drivers.
//!
//! * GROM — greedy on the full final-time-adjoint estimator, no system
//!   reduction; the baseline whose online solves still run at full order.
//! * SR-G-ROM — HaPOD system reduction first, then a greedy on the combined
//!   estimator; the same training set serves both phases, since the system
//!   bases cannot be adjusted during the greedy anymore.
//! * G-SR-ROM — greedy with the full estimator first, independent HaPOD
//!   system reduction second.
//! * GC-ROM — one greedy on the fully reduced model; only the winners'
//!   optimal-control problems are ever solved at full order.
//! * DG-ROM — double greedy: an outer loop enriches the final-time-adjoint
//!   basis, an inner loop enriches the system bases until the scaled
//!   Gramian estimate drops below its tolerance over the inner training set.
//!
//! Ties in every argmax break toward the lowest training-set index, which
//! keeps runs bitwise reproducible.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    estimate_full_with_flow, estimate_gramian_with_flow, EstimateBreakdown, EstimatorConstants,
    OfflineCache,
};
use crate::fom::{solve_fom, GramianOperator, OptimalSolution};
use crate::linalg::space::{extend_orthonormal, orthonormalize, BasisMatrix, MetricTag};
use crate::ltv::{ControlSystem, TimeGrid};
use crate::pod::{pod, PodConfig};
use crate::rom::{
    build_reduced_system, solve_fully_reduced_with_flow, ReducedBases, ReducedFlow, ReducedSystem,
};

/// Floor for rejecting near-dependent enrichment vectors. The effective
/// threshold also scales with the full-order solver tolerance: iterative
/// final-time adjoints carry O(rel_tol) noise normal to the rank-s
/// reachable subspace, and such components are noise, not directions.
const ENRICH_REJECT_FLOOR: f64 = 1e-10;

fn enrich_reject_tol(cfg: &StrategyConfig) -> f64 {
    ENRICH_REJECT_FLOOR.max(10.0 * cfg.fom_rel_tol)
}

/// Tolerances, training sets and limits for the reduction strategies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyConfig {
    /// Greedy tolerance on the combined estimator (GC-ROM, DG-ROM outer).
    pub eps: f64,
    /// Greedy tolerance on the final-time-adjoint estimator
    /// (GROM, SR-G-ROM, G-SR-ROM).
    pub eps_fta: f64,
    /// HaPOD mean-squared error tolerance for the system bases.
    pub eps_sys: f64,
    /// Inner-loop tolerance on the scaled Gramian estimate (DG-ROM).
    pub eps_inner: f64,
    pub train_sys: Vec<Vec<f64>>,
    pub train_fta: Vec<Vec<f64>>,
    pub train_inner: Vec<Vec<f64>>,
    pub mu_init: Vec<f64>,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub hapod_omega: f64,
    pub hapod_slices: usize,
    pub fom_rel_tol: f64,
    pub constants: EstimatorConstants,
    /// Also record per-iteration maximum true errors (requires a full-order
    /// solve per training parameter; test/report mode only).
    pub record_true_errors: bool,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eps", self.eps),
            ("eps_fta", self.eps_fta),
            ("eps_sys", self.eps_sys),
            ("eps_inner", self.eps_inner),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.train_fta.is_empty() || self.train_sys.is_empty() {
            return Err(Error::InvalidConfig("training sets must be nonempty".into()));
        }
        Ok(())
    }

    /// eps_sys is the ℓ²-mean (RMS) trajectory error target, the convention
    /// of the distributed HaPOD; the POD certificate parameter is the mean
    /// squared error, so the square is passed down.
    fn pod_config(&self) -> PodConfig {
        PodConfig {
            tol: self.eps_sys * self.eps_sys,
            max_modes: None,
            hapod_slices: self.hapod_slices,
            omega: self.hapod_omega,
        }
    }
}

/// One inner-loop step of the double greedy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InnerRecord {
    pub selected_mu: Vec<f64>,
    /// c·‖M‖·Δ_Gr at selection, maximal over the inner training set.
    pub scaled_gramian_estimate: f64,
    pub true_gramian_error: Option<f64>,
    pub k_pr: usize,
    pub k_ad: usize,
}

/// One outer greedy iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub selected_mu: Vec<f64>,
    pub max_estimate: f64,
    pub max_true_error: Option<f64>,
    pub n_basis: usize,
    pub k_pr: usize,
    pub k_ad: usize,
    pub fom_solves_cum: usize,
    pub wall_ms: f64,
    /// Maximum c·‖M‖·Δ_Gr over the training set at this selection.
    pub max_gramian_component: Option<f64>,
    /// Maximum c·Δ̂ over the training set at this selection.
    pub max_reduced_component: Option<f64>,
    pub inner: Vec<InnerRecord>,
}

/// Full build log of a greedy run; the CSV export carries only the
/// deterministic columns, timings live in the JSON export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreedyLog {
    pub strategy: String,
    pub converged: bool,
    pub final_max_estimate: f64,
    /// Full-order optimal-control solves performed by the algorithm itself
    /// (true-error diagnostics are not counted).
    pub fom_solves: usize,
    pub total_wall_ms: f64,
    pub iterations: Vec<IterationRecord>,
}

impl GreedyLog {
    pub fn csv_header(param_dim: usize) -> String {
        let mut cols = vec!["iteration".to_string()];
        for d in 0..param_dim {
            cols.push(format!("selected_mu_{d}"));
        }
        cols.extend(
            [
                "max_estimate",
                "max_true_error",
                "n_basis",
                "k_pr",
                "k_ad",
                "fom_solves_cum",
                "max_gramian_component",
                "max_reduced_component",
                "inner_iterations",
            ]
            .map(str::to_string),
        );
        cols.join(",")
    }

    /// Deterministic per-iteration CSV (schema v1); wall times deliberately
    /// excluded so identical configs give byte-identical files.
    pub fn to_csv(&self) -> String {
        let dim = self
            .iterations
            .first()
            .map(|r| r.selected_mu.len())
            .unwrap_or(0);
        let mut out = String::from("# greedy-log-csv v1\n");
        out.push_str(&Self::csv_header(dim));
        out.push('\n');
        for r in &self.iterations {
            let mut row = vec![r.iteration.to_string()];
            for v in &r.selected_mu {
                row.push(format!("{v:.17e}"));
            }
            row.push(format!("{:.17e}", r.max_estimate));
            row.push(r.max_true_error.map(|v| format!("{v:.17e}")).unwrap_or_default());
            row.push(r.n_basis.to_string());
            row.push(r.k_pr.to_string());
            row.push(r.k_ad.to_string());
            row.push(r.fom_solves_cum.to_string());
            row.push(r.max_gramian_component.map(|v| format!("{v:.17e}")).unwrap_or_default());
            row.push(r.max_reduced_component.map(|v| format!("{v:.17e}")).unwrap_or_default());
            row.push(r.inner.len().to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serialization")
    }
}

/// The assembled reduced model: bases, compressed system, offline cache.
pub struct RomBundle {
    pub bases: ReducedBases,
    pub reduced: ReducedSystem,
    pub cache: OfflineCache,
}

impl RomBundle {
    fn assemble(sys: &ControlSystem, bases: ReducedBases) -> Result<Self> {
        let reduced = build_reduced_system(sys, &bases)?;
        let cache = OfflineCache::build(sys, &bases)?;
        Ok(RomBundle {
            bases,
            reduced,
            cache,
        })
    }
}

/// Greedy selection outcome over a training set.
struct Selection {
    winner_idx: usize,
    max_estimate: f64,
    max_gramian: f64,
    max_reduced: f64,
}

/// argmax with lowest-index tie break; `skip` marks exhausted parameters
/// excluded from selection (but not from the termination maximum).
fn select_argmax(estimates: &[f64], skip: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in estimates.iter().enumerate() {
        if skip[i] {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                if e > estimates[b] {
                    best = Some(i);
                }
            }
        }
    }
    best
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}


/// Extend V_ad so that span(V_N) ⊆ span(V_ad) holds exactly (up to machine
/// precision). The terminal projection error inside the Gramian estimator
/// is amplified by C1·C2·‖M‖, so even basis-tolerance-sized leftovers of
/// the final-time adjoints would dominate every estimate; containment makes
/// the term vanish, as the offline-online decomposition remark points out.
fn ensure_vn_in_vad(
    sys: &ControlSystem,
    v_ad: &BasisMatrix,
    v_n: &BasisMatrix,
) -> BasisMatrix {
    let cols: Vec<Vec<f64>> = (0..v_n.k()).map(|j| v_n.column_vec(j)).collect();
    let (extended, _) = extend_orthonormal(sys.space().gram(), v_ad, &cols, 1e-13);
    extended
}

/// Solve the final-time-adjoint least squares on span(V_N) with the FULL
/// dynamics (the GROM online solve): N Gramian applications, one transition.
pub fn solve_grom(
    sys: &ControlSystem,
    grid: &TimeGrid,
    mu: &[f64],
    v_n: &BasisMatrix,
    c: f64,
) -> Result<(DVector<f64>, f64)> {
    let n = sys.n();
    let x0 = sys.x0().evaluate(mu);
    let xt = sys.xt().evaluate(mu);
    let free = sys.apply_state_transition(grid, mu, &x0)?;
    let diff: Vec<f64> = free.iter().zip(&xt).map(|(a, b)| a - b).collect();
    let rhs = sys.m().apply(&diff);
    let n_fta = v_n.k();
    if n_fta == 0 {
        let riesz = sys.space().solve_gram(&rhs)?;
        return Ok((DVector::zeros(0), c * sys.space().g_norm(&riesz)));
    }
    let gramian = GramianOperator::new(sys, grid, mu);
    let mut p_cols: Vec<Vec<f64>> = Vec::with_capacity(n_fta);
    let mut p_cols_dual: Vec<Vec<f64>> = Vec::with_capacity(n_fta);
    for j in 0..n_fta {
        let vj = v_n.column_vec(j);
        let gv = gramian.apply(&vj)?;
        let mgv = sys.m().apply(&gv);
        let etv = sys.e().apply_transpose(&vj);
        let col: Vec<f64> = etv.iter().zip(&mgv).map(|(a, b)| a + b).collect();
        p_cols_dual.push(sys.space().solve_gram(&col)?);
        p_cols.push(col);
    }
    // least squares in the dual norm ‖·‖_{G⁻¹}, matching the estimator
    let dual_inner = |x: &[f64], xd: &[f64], y: &[f64]| -> f64 {
        let _ = x;
        xd.iter().zip(y).map(|(a, b)| a * b).sum()
    };
    let mut normal = DMatrix::zeros(n_fta, n_fta);
    let mut b = DVector::zeros(n_fta);
    for i in 0..n_fta {
        for j in 0..n_fta {
            normal[(i, j)] = dual_inner(&p_cols[i], &p_cols_dual[i], &p_cols[j]);
        }
        b[i] = dual_inner(&p_cols[i], &p_cols_dual[i], &rhs);
    }
    let alpha = normal
        .cholesky()
        .ok_or(Error::FullyReducedSingular)?
        .solve(&b);
    let mut resid = rhs;
    for j in 0..n_fta {
        for i in 0..n {
            resid[i] -= alpha[j] * p_cols[j][i];
        }
    }
    let riesz = sys.space().solve_gram(&resid)?;
    Ok((alpha, c * sys.space().g_norm(&riesz)))
}

/// Baseline greedy on the full final-time-adjoint estimator: builds V_N
/// only; system dynamics stay at full order.
pub fn build_grom(
    sys: &ControlSystem,
    grid: &TimeGrid,
    cfg: &StrategyConfig,
) -> Result<(BasisMatrix, GreedyLog)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut v_n = BasisMatrix::empty(sys.n(), MetricTag::Gram);
    let mut exhausted = vec![false; cfg.train_fta.len()];
    let mut log = GreedyLog {
        strategy: "grom".into(),
        converged: false,
        final_max_estimate: f64::INFINITY,
        fom_solves: 0,
        total_wall_ms: 0.0,
        iterations: Vec::new(),
    };
    let true_solver = TrueErrorOracle::new(cfg.record_true_errors);
    for iteration in 1..=cfg.max_outer_iters {
        let iter_t0 = Instant::now();
        let mut estimates = Vec::with_capacity(cfg.train_fta.len());
        for mu in &cfg.train_fta {
            let (_, delta) = solve_grom(sys, grid, mu, &v_n, cfg.constants.c)?;
            estimates.push(delta);
        }
        let max_estimate = max_of(&estimates);
        log.final_max_estimate = max_estimate;
        let max_true = true_solver.max_true_error_grom(sys, grid, cfg, &v_n)?;
        if max_estimate <= cfg.eps_fta {
            log.converged = true;
            break;
        }
        let Some(winner) = select_argmax(&estimates, &exhausted) else {
            break;
        };
        let mu_win = cfg.train_fta[winner].clone();
        let sol = solve_fom(sys, grid, &mu_win, cfg.fom_rel_tol)?;
        log.fom_solves += 1;
        let (extended, accepted) =
            extend_orthonormal(sys.space().gram(), &v_n, &[sol.phi_t], enrich_reject_tol(cfg));
        v_n = extended;
        if accepted == 0 {
            exhausted[winner] = true;
        }
        log.iterations.push(IterationRecord {
            iteration,
            selected_mu: mu_win,
            max_estimate,
            max_true_error: max_true,
            n_basis: v_n.k(),
            k_pr: 0,
            k_ad: 0,
            fom_solves_cum: log.fom_solves,
            wall_ms: iter_t0.elapsed().as_secs_f64() * 1e3,
            max_gramian_component: None,
            max_reduced_component: None,
            inner: Vec::new(),
        });
    }
    log.total_wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((v_n, log))
}

/// HaPOD system bases from full-order optimal trajectories over a training
/// set; chunked per parameter. Returns (V_pr, V_ad) and increments the
/// solve counter by the training-set size.
fn hapod_system_bases(
    sys: &ControlSystem,
    grid: &TimeGrid,
    params: &[Vec<f64>],
    cfg: &StrategyConfig,
    fom_solves: &mut usize,
) -> Result<(BasisMatrix, BasisMatrix)> {
    let mut chunks_x: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.len());
    let mut chunks_phi: Vec<Vec<Vec<f64>>> = Vec::with_capacity(params.len());
    for mu in params {
        let sol = solve_fom(sys, grid, mu, cfg.fom_rel_tol)?;
        *fom_solves += 1;
        chunks_x.push(sol.x);
        // the adjoint trajectory ends at the terminal datum itself; the
        // stage values alone would leave the final-time adjoint direction
        // out of the span
        let mut phi = sol.phi;
        phi.push(sol.phi_t);
        chunks_phi.push(phi);
    }
    let pod_cfg = cfg.pod_config();
    let v_pr = crate::pod::hapod(sys.space(), &chunks_x, &pod_cfg);
    let v_ad = crate::pod::hapod(sys.space(), &chunks_phi, &pod_cfg);
    Ok((v_pr, v_ad))
}

/// Sweep the combined estimator over a training set with the current model.
fn sweep_full_estimator(
    sys: &ControlSystem,
    bundle: &RomBundle,
    grid: &TimeGrid,
    params: &[Vec<f64>],
    consts: &EstimatorConstants,
) -> Result<(Vec<f64>, Vec<EstimateBreakdown>)> {
    let _ = sys;
    let mut estimates = Vec::with_capacity(params.len());
    let mut breakdowns = Vec::with_capacity(params.len());
    for mu in params {
        let flow = ReducedFlow::new(&bundle.reduced, grid, mu);
        let fr = solve_fully_reduced_with_flow(&flow, &bundle.cache)?;
        let bd = estimate_full_with_flow(&bundle.cache, &flow, &fr.alpha, fr.reduced_residual, consts)?;
        estimates.push(bd.total);
        breakdowns.push(bd);
    }
    Ok((estimates, breakdowns))
}

fn selection_from(estimates: &[f64], breakdowns: &[EstimateBreakdown], skip: &[bool]) -> Option<Selection> {
    let winner_idx = select_argmax(estimates, skip)?;
    Some(Selection {
        winner_idx,
        max_estimate: max_of(estimates),
        max_gramian: breakdowns.iter().map(|b| b.gramian).fold(0.0, f64::max),
        max_reduced: breakdowns.iter().map(|b| b.reduced_residual).fold(0.0, f64::max),
    })
}

/// System reduction first (HaPOD over the whole training set), then a
/// greedy on the combined estimator enriching V_N with full-order solves.
pub fn build_sr_g_rom(
    sys: &ControlSystem,
    grid: &TimeGrid,
    cfg: &StrategyConfig,
) -> Result<(RomBundle, GreedyLog)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut log = GreedyLog {
        strategy: "sr-g".into(),
        converged: false,
        final_max_estimate: f64::INFINITY,
        fom_solves: 0,
        total_wall_ms: 0.0,
        iterations: Vec::new(),
    };
    // Phase (i)+(ii): system reduction over the training set. The same set
    // drives the greedy below; the system bases cannot be adapted later.
    let train = &cfg.train_sys;
    let (v_pr, v_ad) = hapod_system_bases(sys, grid, train, cfg, &mut log.fom_solves)?;
    let v_n = BasisMatrix::empty(sys.n(), MetricTag::Gram);
    let mut bundle = RomBundle::assemble(sys, ReducedBases::galerkin(v_pr, v_ad, v_n))?;
    let mut exhausted = vec![false; train.len()];
    let true_solver = TrueErrorOracle::new(cfg.record_true_errors);

    for iteration in 1..=cfg.max_outer_iters {
        let iter_t0 = Instant::now();
        let (estimates, breakdowns) = sweep_full_estimator(sys, &bundle, grid, train, &cfg.constants)?;
        let Some(sel) = selection_from(&estimates, &breakdowns, &exhausted) else {
            log.final_max_estimate = max_of(&estimates);
            break;
        };
        log.final_max_estimate = sel.max_estimate;
        let max_true = true_solver.max_true_error_bundle(sys, grid, cfg, &bundle, train)?;
        if sel.max_estimate <= cfg.eps_fta {
            log.converged = true;
            break;
        }
        let mu_win = train[sel.winner_idx].clone();
        let sol = solve_fom(sys, grid, &mu_win, cfg.fom_rel_tol)?;
        log.fom_solves += 1;
        let (v_n_new, accepted) = extend_orthonormal(
            sys.space().gram(),
            &bundle.bases.v_n,
            &[sol.phi_t],
            enrich_reject_tol(cfg),
        );
        if accepted == 0 {
            exhausted[sel.winner_idx] = true;
        }
        let v_ad_new = ensure_vn_in_vad(sys, &bundle.bases.v_ad, &v_n_new);
        let bases = ReducedBases {
            v_ad: v_ad_new.clone(),
            w_ad: v_ad_new,
            v_n: v_n_new,
            ..bundle.bases.clone()
        };
        bundle = RomBundle::assemble(sys, bases)?;
        log.iterations.push(IterationRecord {
            iteration,
            selected_mu: mu_win,
            max_estimate: sel.max_estimate,
            max_true_error: max_true,
            n_basis: bundle.bases.n_fta(),
            k_pr: bundle.bases.k_pr(),
            k_ad: bundle.bases.k_ad(),
            fom_solves_cum: log.fom_solves,
            wall_ms: iter_t0.elapsed().as_secs_f64() * 1e3,
            max_gramian_component: Some(sel.max_gramian),
            max_reduced_component: Some(sel.max_reduced),
            inner: Vec::new(),
        });
    }
    log.total_wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((bundle, log))
}

/// Greedy with the full estimator first (identical to the GROM greedy),
/// independent HaPOD system reduction second.
pub fn build_g_sr_rom(
    sys: &ControlSystem,
    grid: &TimeGrid,
    cfg: &StrategyConfig,
) -> Result<(RomBundle, GreedyLog)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let (v_n, mut log) = build_grom(sys, grid, cfg)?;
    log.strategy = "g-sr".into();
    let (v_pr, v_ad) = hapod_system_bases(sys, grid, &cfg.train_sys, cfg, &mut log.fom_solves)?;
    let v_ad = ensure_vn_in_vad(sys, &v_ad, &v_n);
    let bundle = RomBundle::assemble(sys, ReducedBases::galerkin(v_pr, v_ad, v_n))?;
    if let Some(last) = log.iterations.last_mut() {
        last.k_pr = bundle.bases.k_pr();
        last.k_ad = bundle.bases.k_ad();
    }
    log.total_wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((bundle, log))
}

/// POD-merge of an existing basis with new trajectory snapshots, compressed
/// as one snapshot set at the system tolerance.
fn merge_basis(
    sys: &ControlSystem,
    basis: &BasisMatrix,
    trajectory: &[Vec<f64>],
    cfg: &StrategyConfig,
) -> BasisMatrix {
    let mut snapshots: Vec<Vec<f64>> = (0..basis.k()).map(|j| basis.column_vec(j)).collect();
    snapshots.extend(trajectory.iter().cloned());
    let pod_cfg = cfg.pod_config();
    pod(sys.space(), &snapshots, &pod_cfg).basis
}

/// Single greedy on the fully reduced model: every iteration enriches V_N
/// with the winner's final-time adjoint and merges the winner's optimal
/// trajectories into the system bases. Only winners are solved at full
/// order.
pub fn build_gc_rom(
    sys: &ControlSystem,
    grid: &TimeGrid,
    cfg: &StrategyConfig,
) -> Result<(RomBundle, GreedyLog)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut log = GreedyLog {
        strategy: "gc".into(),
        converged: false,
        final_max_estimate: f64::INFINITY,
        fom_solves: 0,
        total_wall_ms: 0.0,
        iterations: Vec::new(),
    };
    let train = &cfg.train_fta;
    let n = sys.n();
    let mut bundle = RomBundle::assemble(
        sys,
        ReducedBases::galerkin(
            BasisMatrix::empty(n, MetricTag::Gram),
            BasisMatrix::empty(n, MetricTag::Gram),
            BasisMatrix::empty(n, MetricTag::Gram),
        ),
    )?;
    let mut exhausted = vec![false; train.len()];
    let true_solver = TrueErrorOracle::new(cfg.record_true_errors);
    for iteration in 1..=cfg.max_outer_iters {
        let iter_t0 = Instant::now();
        let (estimates, breakdowns) = sweep_full_estimator(sys, &bundle, grid, train, &cfg.constants)?;
        let Some(sel) = selection_from(&estimates, &breakdowns, &exhausted) else {
            log.final_max_estimate = max_of(&estimates);
            break;
        };
        log.final_max_estimate = sel.max_estimate;
        let max_true = true_solver.max_true_error_bundle(sys, grid, cfg, &bundle, train)?;
        if sel.max_estimate <= cfg.eps {
            log.converged = true;
            break;
        }
        let mu_win = train[sel.winner_idx].clone();
        let sol = solve_fom(sys, grid, &mu_win, cfg.fom_rel_tol)?;
        log.fom_solves += 1;
        let (v_n_new, accepted) = extend_orthonormal(
            sys.space().gram(),
            &bundle.bases.v_n,
            &[sol.phi_t.clone()],
            enrich_reject_tol(cfg),
        );
        if accepted == 0 {
            exhausted[sel.winner_idx] = true;
        }
        let v_pr = merge_basis(sys, &bundle.bases.v_pr, &sol.x, cfg);
        let mut phi_snaps = sol.phi.clone();
        phi_snaps.push(sol.phi_t.clone());
        let v_ad = merge_basis(sys, &bundle.bases.v_ad, &phi_snaps, cfg);
        let v_ad = ensure_vn_in_vad(sys, &v_ad, &v_n_new);
        bundle = RomBundle::assemble(sys, ReducedBases::galerkin(v_pr, v_ad, v_n_new))?;
        log.iterations.push(IterationRecord {
            iteration,
            selected_mu: mu_win,
            max_estimate: sel.max_estimate,
            max_true_error: max_true,
            n_basis: bundle.bases.n_fta(),
            k_pr: bundle.bases.k_pr(),
            k_ad: bundle.bases.k_ad(),
            fom_solves_cum: log.fom_solves,
            wall_ms: iter_t0.elapsed().as_secs_f64() * 1e3,
            max_gramian_component: Some(sel.max_gramian),
            max_reduced_component: Some(sel.max_reduced),
            inner: Vec::new(),
        });
    }
    log.total_wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((bundle, log))
}

/// Scaled Gramian estimates c·‖M‖·Δ_Gr over the inner training set, at the
/// fully reduced solutions of the current model.
fn inner_gramian_sweep(
    bundle: &RomBundle,
    grid: &TimeGrid,
    params: &[Vec<f64>],
    consts: &EstimatorConstants,
) -> Result<Vec<f64>> {
    let scale = consts.c * bundle.cache.m_norm();
    let mut out = Vec::with_capacity(params.len());
    for mu in params {
        let flow = ReducedFlow::new(&bundle.reduced, grid, mu);
        let fr = solve_fully_reduced_with_flow(&flow, &bundle.cache)?;
        let dgr = estimate_gramian_with_flow(&bundle.cache, &flow, &fr.alpha, consts)?;
        out.push(scale * dgr);
    }
    Ok(out)
}

/// Double greedy: outer loop on the combined estimator enriching V_N, inner
/// loop enriching the system bases until the scaled Gramian estimate over
/// the inner training set falls below ε_inner.
pub fn build_dg_rom(
    sys: &ControlSystem,
    grid: &TimeGrid,
    cfg: &StrategyConfig,
) -> Result<(RomBundle, GreedyLog)> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut log = GreedyLog {
        strategy: "dg".into(),
        converged: false,
        final_max_estimate: f64::INFINITY,
        fom_solves: 0,
        total_wall_ms: 0.0,
        iterations: Vec::new(),
    };
    let train = &cfg.train_fta;
    let n = sys.n();
    let mut bundle = RomBundle::assemble(
        sys,
        ReducedBases::galerkin(
            BasisMatrix::empty(n, MetricTag::Gram),
            BasisMatrix::empty(n, MetricTag::Gram),
            BasisMatrix::empty(n, MetricTag::Gram),
        ),
    )?;
    let mut exhausted = vec![false; train.len()];
    let true_solver = TrueErrorOracle::new(cfg.record_true_errors);
    for iteration in 1..=cfg.max_outer_iters {
        let iter_t0 = Instant::now();
        let (estimates, breakdowns) = sweep_full_estimator(sys, &bundle, grid, train, &cfg.constants)?;
        let Some(sel) = selection_from(&estimates, &breakdowns, &exhausted) else {
            log.final_max_estimate = max_of(&estimates);
            break;
        };
        log.final_max_estimate = sel.max_estimate;
        // the inner-loop contract: at every outer selection the scaled
        // Gramian estimate over the inner set sits below ε_inner
        let inner_estimates = inner_gramian_sweep(&bundle, grid, &cfg.train_inner, &cfg.constants)?;
        let inner_max_at_selection = max_of(&inner_estimates);
        let max_true = true_solver.max_true_error_bundle(sys, grid, cfg, &bundle, train)?;
        let mut record = IterationRecord {
            iteration,
            selected_mu: Vec::new(),
            max_estimate: sel.max_estimate,
            max_true_error: max_true,
            n_basis: bundle.bases.n_fta(),
            k_pr: bundle.bases.k_pr(),
            k_ad: bundle.bases.k_ad(),
            fom_solves_cum: log.fom_solves,
            wall_ms: 0.0,
            max_gramian_component: Some(inner_max_at_selection),
            max_reduced_component: Some(sel.max_reduced),
            inner: Vec::new(),
        };
        if sel.max_estimate <= cfg.eps {
            log.converged = true;
            break;
        }
        let mu_win = train[sel.winner_idx].clone();
        record.selected_mu = mu_win.clone();
        let sol = solve_fom(sys, grid, &mu_win, cfg.fom_rel_tol)?;
        log.fom_solves += 1;
        let (v_n_new, accepted) = extend_orthonormal(
            sys.space().gram(),
            &bundle.bases.v_n,
            &[sol.phi_t.clone()],
            enrich_reject_tol(cfg),
        );
        if accepted == 0 {
            exhausted[sel.winner_idx] = true;
        }
        let v_ad_new = ensure_vn_in_vad(sys, &bundle.bases.v_ad, &v_n_new);
        bundle = RomBundle::assemble(
            sys,
            ReducedBases {
                v_ad: v_ad_new.clone(),
                w_ad: v_ad_new,
                v_n: v_n_new,
                ..bundle.bases.clone()
            },
        )?;
        // inner greedy on the scaled Gramian estimate
        let mut inner_iters = 0;
        loop {
            let inner_estimates = inner_gramian_sweep(&bundle, grid, &cfg.train_inner, &cfg.constants)?;
            let inner_max = max_of(&inner_estimates);
            if inner_max <= cfg.eps_inner || inner_iters >= cfg.max_inner_iters {
                break;
            }
            let no_skip = vec![false; inner_estimates.len()];
            let winner = select_argmax(&inner_estimates, &no_skip).expect("nonempty inner set");
            let mu_inner = cfg.train_inner[winner].clone();
            let sol_inner = solve_fom(sys, grid, &mu_inner, cfg.fom_rel_tol)?;
            log.fom_solves += 1;
            inner_iters += 1;
            let v_pr = merge_basis(sys, &bundle.bases.v_pr, &sol_inner.x, cfg);
            let mut phi_snaps = sol_inner.phi.clone();
            phi_snaps.push(sol_inner.phi_t.clone());
            let v_ad = merge_basis(sys, &bundle.bases.v_ad, &phi_snaps, cfg);
            let v_ad = ensure_vn_in_vad(sys, &v_ad, &bundle.bases.v_n);
            bundle = RomBundle::assemble(
                sys,
                ReducedBases::galerkin(v_pr, v_ad, bundle.bases.v_n.clone()),
            )?;
            let true_gr = true_solver.true_gramian_error(sys, grid, &bundle, &mu_inner)?;
            record.inner.push(InnerRecord {
                selected_mu: mu_inner,
                scaled_gramian_estimate: inner_max,
                true_gramian_error: true_gr,
                k_pr: bundle.bases.k_pr(),
                k_ad: bundle.bases.k_ad(),
            });
        }
        record.n_basis = bundle.bases.n_fta();
        record.k_pr = bundle.bases.k_pr();
        record.k_ad = bundle.bases.k_ad();
        record.fom_solves_cum = log.fom_solves;
        record.wall_ms = iter_t0.elapsed().as_secs_f64() * 1e3;
        log.iterations.push(record);
    }
    log.total_wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((bundle, log))
}

/// True-error diagnostics for test/report mode. The full-order solves here
/// are deliberately not counted in the algorithm's solve tally.
struct TrueErrorOracle {
    enabled: bool,
}

impl TrueErrorOracle {
    fn new(enabled: bool) -> Self {
        TrueErrorOracle { enabled }
    }

    fn solve(&self, sys: &ControlSystem, grid: &TimeGrid, cfg: &StrategyConfig, mu: &[f64]) -> Result<OptimalSolution> {
        solve_fom(sys, grid, mu, cfg.fom_rel_tol)
    }

    fn max_true_error_grom(
        &self,
        sys: &ControlSystem,
        grid: &TimeGrid,
        cfg: &StrategyConfig,
        v_n: &BasisMatrix,
    ) -> Result<Option<f64>> {
        if !self.enabled {
            return Ok(None);
        }
        let mut worst: f64 = 0.0;
        for mu in &cfg.train_fta {
            let (alpha, _) = solve_grom(sys, grid, mu, v_n, cfg.constants.c)?;
            let approx = if v_n.k() == 0 { vec![0.0; sys.n()] } else { v_n.lift(&alpha) };
            let sol = self.solve(sys, grid, cfg, mu)?;
            let diff: Vec<f64> = sol.phi_t.iter().zip(&approx).map(|(a, b)| a - b).collect();
            worst = worst.max(sys.space().g_norm(&diff));
        }
        Ok(Some(worst))
    }

    fn max_true_error_bundle(
        &self,
        sys: &ControlSystem,
        grid: &TimeGrid,
        cfg: &StrategyConfig,
        bundle: &RomBundle,
        params: &[Vec<f64>],
    ) -> Result<Option<f64>> {
        if !self.enabled {
            return Ok(None);
        }
        let mut worst: f64 = 0.0;
        for mu in params {
            let flow = ReducedFlow::new(&bundle.reduced, grid, mu);
            let fr = solve_fully_reduced_with_flow(&flow, &bundle.cache)?;
            let approx = fr.lift_phi(&bundle.bases);
            let sol = self.solve(sys, grid, cfg, mu)?;
            let diff: Vec<f64> = sol.phi_t.iter().zip(&approx).map(|(a, b)| a - b).collect();
            worst = worst.max(sys.space().g_norm(&diff));
        }
        Ok(Some(worst))
    }

    fn true_gramian_error(
        &self,
        sys: &ControlSystem,
        grid: &TimeGrid,
        bundle: &RomBundle,
        mu: &[f64],
    ) -> Result<Option<f64>> {
        if !self.enabled {
            return Ok(None);
        }
        let flow = ReducedFlow::new(&bundle.reduced, grid, mu);
        let fr = solve_fully_reduced_with_flow(&flow, &bundle.cache)?;
        let phi_n = fr.lift_phi(&bundle.bases);
        let p_hat = bundle.cache.m11() * &fr.alpha;
        let ghat = flow.apply_reduced_gramian(&p_hat)?;
        let lifted = bundle.bases.v_pr.lift(&ghat);
        let full = GramianOperator::new(sys, grid, mu).apply(&phi_n)?;
        let dev: Vec<f64> = lifted.iter().zip(&full).map(|(a, b)| a - b).collect();
        Ok(Some(sys.space().g_norm(&dev)))
    }
}

/// Members shared by all drivers when the V_N basis alone defines the model
/// (used to persist GROM results alongside the combined bundles).
pub fn v_n_to_bases(sys: &ControlSystem, v_n: BasisMatrix) -> ReducedBases {
    ReducedBases::galerkin(
        BasisMatrix::empty(sys.n(), MetricTag::Gram),
        BasisMatrix::empty(sys.n(), MetricTag::Gram),
        v_n,
    )
}

/// Orthonormalize raw snapshots into a G-orthonormal V_N (test helper and
/// archive loader support).
pub fn orthonormal_vn(sys: &ControlSystem, vectors: &[Vec<f64>]) -> BasisMatrix {
    orthonormalize(sys.space().gram(), vectors, MetricTag::Gram)
}
