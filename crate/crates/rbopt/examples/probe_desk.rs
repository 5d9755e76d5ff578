use rbopt::cookie::{assemble_cookie, log_uniform_grid, CookieConfig};
use rbopt::estimators::{c2_power_iteration, EstimatorConstants};
use rbopt::strategies::{build_sr_g_rom, StrategyConfig};

fn main() {
    let cookie = assemble_cookie(&CookieConfig::default()).unwrap();
    let sys = &cookie.system;
    let grid = &cookie.grid;
    eprintln!("n = {}", sys.n());
    let c2 = c2_power_iteration(sys, grid, &[1.0, 1.0]).unwrap();
    eprintln!("C2 = {c2:.4e}");
    let consts = EstimatorConstants { c1: 1.0, c2, c: 1.0 };
    let train = log_uniform_grid(5);
    let cfg = StrategyConfig {
        eps: 1e-4,
        eps_fta: 1e-4,
        eps_sys: 1e-9,
        eps_inner: 1e-5,
        train_sys: train.clone(),
        train_fta: train.clone(),
        train_inner: train,
        mu_init: vec![1.0, 1.0],
        max_outer_iters: 12,
        max_inner_iters: 50,
        hapod_omega: 0.9,
        hapod_slices: 50,
        fom_rel_tol: 1e-8,
        constants: consts,
        record_true_errors: false,
    };
    let t2 = std::time::Instant::now();
    let (bundle, log) = build_sr_g_rom(sys, grid, &cfg).unwrap();
    eprintln!(
        "SR-G: converged={} iters={} N={} k_pr={} k_ad={} fom_solves={} in {:?}",
        log.converged, log.iterations.len(), bundle.bases.n_fta(),
        bundle.bases.k_pr(), bundle.bases.k_ad(), log.fom_solves, t2.elapsed()
    );
    for r in &log.iterations {
        eprintln!(
            "  it {}: est={:.3e} gram={:.3e} red={:.3e} N={} mu={:?} wall={:.0}ms",
            r.iteration, r.max_estimate, r.max_gramian_component.unwrap_or(-1.0),
            r.max_reduced_component.unwrap_or(-1.0), r.n_basis, r.selected_mu, r.wall_ms
        );
    }
    eprintln!("final max estimate: {:.3e}", log.final_max_estimate);
    eprintln!("m_norm = {:.4e}", bundle.cache.m_norm());
}
