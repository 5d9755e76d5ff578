use rbopt::cookie::{assemble_cookie, log_uniform_grid, log_uniform_random, CookieConfig};
use rbopt::estimators::{c2_power_iteration, estimate_fta_full, estimate_full_with_flow, EstimatorConstants};
use rbopt::fom::solve_fom;
use rbopt::rom::{solve_fully_reduced_with_flow, ReducedFlow};
use rbopt::strategies::{build_grom, build_sr_g_rom, solve_grom, StrategyConfig};

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
        mu_init: vec![1.0, 1.0], max_outer_iters: 10, max_inner_iters: 60,
        hapod_omega: 0.9, hapod_slices: 50, fom_rel_tol: 1e-8,
        constants: consts, record_true_errors: false,
    };
    // GROM at Table-2 eps_fta = 1e-4
    let t = std::time::Instant::now();
    let (v_n, log) = build_grom(sys, grid, &cfg).unwrap();
    eprintln!("GROM(1e-4): converged={} N={} iters={} final={:.3e} in {:?}",
        log.converged, v_n.k(), log.iterations.len(), log.final_max_estimate, t.elapsed());
    for r in &log.iterations {
        eprintln!("  it {}: est={:.3e} N={}", r.iteration, r.max_estimate, r.n_basis);
    }
    // Eq (9) reliability with c = 1, dual norm
    let mut worst: f64 = 0.0;
    for mu in log_uniform_random(6, 3) {
        let (alpha, delta) = solve_grom(sys, grid, &mu, &v_n, 1.0).unwrap();
        let p = v_n.lift(&alpha);
        let sol = solve_fom(sys, grid, &mu, 1e-10).unwrap();
        let diff: Vec<f64> = sol.phi_t.iter().zip(&p).map(|(a, b)| a - b).collect();
        let true_err = sys.space().g_norm(&diff);
        let d2 = estimate_fta_full(sys, grid, &mu, &p, 1.0).unwrap();
        worst = worst.max(true_err / delta.min(d2));
        eprintln!("  mu=({:.2},{:.2}): Delta={:.3e} true={:.3e} eff={:.2}",
            mu[0], mu[1], delta, true_err, delta / true_err);
    }
    eprintln!("worst true/estimate ratio: {worst:.3}");
    // SR-G at Table-2 tolerances: where does Delta_full sit now?
    let t = std::time::Instant::now();
    let mut cfg2 = cfg.clone();
    cfg2.max_outer_iters = 7;
    let (bundle, log) = build_sr_g_rom(sys, grid, &cfg2).unwrap();
    eprintln!("SR-G: conv={} N={} k_pr={} k_ad={} final={:.3e} in {:?}",
        log.converged, bundle.bases.n_fta(), bundle.bases.k_pr(), bundle.bases.k_ad(),
        log.final_max_estimate, t.elapsed());
    for r in &log.iterations {
        eprintln!("  it {}: est={:.3e} gram={:.3e} red={:.3e} N={}", r.iteration,
            r.max_estimate, r.max_gramian_component.unwrap_or(-1.0),
            r.max_reduced_component.unwrap_or(-1.0), r.n_basis);
    }
    // test-parameter efficiency of Delta_full
    let mut effs = Vec::new();
    for mu in log_uniform_random(6, 7) {
        let flow = ReducedFlow::new(&bundle.reduced, grid, &mu);
        let fr = solve_fully_reduced_with_flow(&flow, &bundle.cache).unwrap();
        let bd = estimate_full_with_flow(&bundle.cache, &flow, &fr.alpha, fr.reduced_residual, &consts).unwrap();
        let sol = solve_fom(sys, grid, &mu, 1e-8).unwrap();
        let lifted = fr.lift_phi(&bundle.bases);
        let diff: Vec<f64> = sol.phi_t.iter().zip(&lifted).map(|(a, b)| a - b).collect();
        let true_err = sys.space().g_norm(&diff);
        effs.push(bd.total / true_err);
        eprintln!("  mu=({:.2},{:.2}): est={:.3e} (g {:.3e} r {:.3e}) true={:.3e} eff={:.1e}",
            mu[0], mu[1], bd.total, bd.gramian, bd.reduced_residual, true_err, bd.total/true_err);
    }
    eprintln!("mean eff: {:.3e}", effs.iter().sum::<f64>() / effs.len() as f64);
}
