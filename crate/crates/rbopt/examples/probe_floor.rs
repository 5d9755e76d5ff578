use rbopt::cookie::{assemble_cookie, log_uniform_grid, log_uniform_random, CookieConfig};
use rbopt::estimators::{c2_power_iteration, estimate_full_with_flow, EstimatorConstants};
use rbopt::fom::solve_fom;
use rbopt::rom::{solve_fully_reduced_with_flow, ReducedFlow};
use rbopt::strategies::{build_sr_g_rom, StrategyConfig};

fn main() {
    let cookie = assemble_cookie(&CookieConfig::default()).unwrap();
    let sys = &cookie.system;
    let grid = &cookie.grid;
    let c2 = c2_power_iteration(sys, grid, &[1.0, 1.0]).unwrap();
    let consts = EstimatorConstants { c1: 1.0, c2, c: 1.0 };
    let train = log_uniform_grid(10); // 100 points
    let cfg = StrategyConfig {
        eps: 1e-4, eps_fta: 1e-4, eps_sys: 1e-9, eps_inner: 1e-5,
        train_sys: train.clone(), train_fta: train.clone(), train_inner: train,
        mu_init: vec![1.0, 1.0], max_outer_iters: 7, max_inner_iters: 50,
        hapod_omega: 0.9, hapod_slices: 50, fom_rel_tol: 1e-8,
        constants: consts, record_true_errors: false,
    };
    let t = std::time::Instant::now();
    let (bundle, log) = build_sr_g_rom(sys, grid, &cfg).unwrap();
    eprintln!("SR-G(100): N={} k_pr={} k_ad={} iters={} in {:?}",
        bundle.bases.n_fta(), bundle.bases.k_pr(), bundle.bases.k_ad(),
        log.iterations.len(), t.elapsed());
    for r in &log.iterations {
        eprintln!("  it {}: est={:.3e} gram={:.3e} red={:.3e} N={}",
            r.iteration, r.max_estimate, r.max_gramian_component.unwrap_or(-1.0),
            r.max_reduced_component.unwrap_or(-1.0), r.n_basis);
    }
    eprintln!("final max est over train: {:.3e}", log.final_max_estimate);

    // test sweep: true errors + efficiency
    let test = log_uniform_random(10, 7);
    let mut effs = Vec::new();
    for mu in &test {
        let flow = ReducedFlow::new(&bundle.reduced, grid, mu);
        let fr = solve_fully_reduced_with_flow(&flow, &bundle.cache).unwrap();
        let bd = estimate_full_with_flow(&bundle.cache, &flow, &fr.alpha, fr.reduced_residual, &consts).unwrap();
        let sol = solve_fom(sys, grid, mu, 1e-8).unwrap();
        let lifted = fr.lift_phi(&bundle.bases);
        let diff: Vec<f64> = sol.phi_t.iter().zip(&lifted).map(|(a, b)| a - b).collect();
        let true_err = sys.space().g_norm(&diff);
        effs.push(bd.total / true_err);
        eprintln!("mu=({:.2},{:.2}): est={:.3e} (gram {:.3e}) true={:.3e} eff={:.1e}",
            mu[0], mu[1], bd.total, bd.gramian, true_err, bd.total / true_err);
    }
    let mean_eff = effs.iter().sum::<f64>() / effs.len() as f64;
    eprintln!("mean efficiency: {mean_eff:.3e}");
}
