use nalgebra::DVector;
use rbopt::cookie::{assemble_cookie, log_uniform_grid, CookieConfig};
use rbopt::estimators::{c2_power_iteration, estimate_adjoint_stage_sweep, EstimatorConstants, OfflineCache};
use rbopt::fom::GramianOperator;
use rbopt::rom::{build_reduced_system, solve_fully_reduced_with_flow, ReducedFlow};
use rbopt::strategies::{build_sr_g_rom, StrategyConfig};

fn main() {
    let cookie = assemble_cookie(&CookieConfig::default()).unwrap();
    let sys = &cookie.system;
    let grid = &cookie.grid;
    let c2 = c2_power_iteration(sys, grid, &[1.0, 1.0]).unwrap();
    let consts = EstimatorConstants { c1: 1.0, c2, c: 1.0 };
    let train = log_uniform_grid(5);
    let cfg = StrategyConfig {
        eps: 1e-4, eps_fta: 1e-4, eps_sys: 1e-9, eps_inner: 1e-5,
        train_sys: train.clone(), train_fta: train.clone(), train_inner: train,
        mu_init: vec![1.0, 1.0], max_outer_iters: 5, max_inner_iters: 50,
        hapod_omega: 0.9, hapod_slices: 50, fom_rel_tol: 1e-8,
        constants: consts, record_true_errors: false,
    };
    let (bundle, _) = build_sr_g_rom(sys, grid, &cfg).unwrap();
    eprintln!("bases: N={} k_pr={} k_ad={}", bundle.bases.n_fta(), bundle.bases.k_pr(), bundle.bases.k_ad());
    let red = &bundle.reduced;
    let cache = &bundle.cache;

    for mu in [vec![100.0, 100.0], vec![1.0, 1.0], vec![100.0, 0.1]] {
        let flow = ReducedFlow::new(red, grid, &mu);
        let fr = solve_fully_reduced_with_flow(&flow, cache).unwrap();
        let alpha = fr.alpha.clone();
        let p_hat = cache.m11() * &alpha;
        let chi = flow.adjoint_stages(&p_hat).unwrap();
        let u = flow.control_from_adjoint(&chi).unwrap();
        let x = flow.integrate_primal(&DVector::zeros(red.k_pr()), &u).unwrap();
        let proj = cache.vn_projection_error_sq(&alpha).sqrt();
        let sweep = estimate_adjoint_stage_sweep(cache, grid, &mu, &chi, &p_hat, proj, 1.0);
        // per-sample adjoint residuals
        let dt = grid.dt();
        let mut rho = vec![0.0; grid.nt() + 1];
        for k in 0..grid.nt() {
            let dphi = (&chi[k + 1] - &chi[k]) / dt;
            rho[k] = cache.adjoint_residual_sq(&mu, grid.node(k), &chi[k], &dphi).sqrt();
        }
        let dphi = (&p_hat - &chi[grid.nt()]) / dt;
        rho[grid.nt()] = cache.adjoint_residual_sq(&mu, grid.node(grid.nt()), &chi[grid.nt()], &dphi).sqrt();
        let prim = rbopt::estimators::primal_residual_integral(cache, grid, &mu, &x, &u);
        eprintln!("mu={mu:?}: proj={proj:.2e} rho[0]={:.3e} rho[25]={:.3e} rho[49]={:.3e} rho[50]={:.3e}", rho[0], rho[25], rho[49], rho[50]);
        eprintln!("  int_Dad(trapz of sweep)={:.3e}  int_prim={:.3e}", {
            let inner: f64 = sweep[1..sweep.len()-1].iter().sum();
            dt * (0.5*sweep[0] + inner + 0.5*sweep[sweep.len()-1])
        }, prim[grid.nt()]);
        // true Gramian deviation
        let phi_n = fr.lift_phi(&bundle.bases);
        let ghat = flow.apply_reduced_gramian(&p_hat).unwrap();
        let lifted = bundle.bases.v_pr.lift(&ghat);
        let full = GramianOperator::new(sys, grid, &mu).apply(&phi_n).unwrap();
        let dev: Vec<f64> = lifted.iter().zip(&full).map(|(a, b)| a - b).collect();
        eprintln!("  TRUE gramian deviation = {:.3e}   ||phi_n||_G = {:.3e}", sys.space().g_norm(&dev), sys.space().g_norm(&phi_n));
    }
}
