use hypode::analysis::*;
use hypode::characteristics::settling_times;
use hypode::config::{load_config, Config};
use hypode::design::{run_design, Design};
use hypode::linalg::{eigenvalues, spectrum_distance};
use hypode::model::{parse_expression, SpatialMatrixFunction};
use hypode::simulator::*;
use nalgebra::DMatrix;
use num_complex::Complex64;

fn designed(n: usize) -> (Config, Design) {
    let mut cfg = load_config(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper_example.toml")).unwrap();
    cfg.design.grid = n;
    let d = run_design(&cfg.plant, &cfg.design).unwrap();
    (cfg, d)
}

#[test]
fn homogeneous_data_gives_zero_sigma() {
    let (cfg, d) = designed(60);
    let spec = &cfg.plant;
    let h0 = SpatialMatrixFunction::zeros(d.grid, spec.n, spec.p);
    let f_tilde = &spec.f - DMatrix::identity(3, 3) * 4.0;
    let sol = solve_sigma(spec, &d.sp, &h0, &f_tilde, &DMatrix::zeros(spec.p, spec.n_xi)).unwrap();
    assert_eq!(sol.sigma.sup_norm(), 0.0);
    assert!(sol.cond.is_finite());
}

#[test]
fn sigma_satisfies_its_boundary_value_problem() {
    let mut interior = Vec::new();
    for n in [100, 200] {
        let (cfg, d) = designed(n);
        let m = closed_loop_model(&cfg.plant, &d).unwrap();
        let (r0, r1) = sigma_boundary_residuals(&m.sigma, &cfg.plant.q0, &m.q1_tilde);
        let scale = m.sigma.sup_norm();
        assert!(r0 <= 1e-6 && r1 <= 1e-6, "{r0:e} {r1:e}");
        assert!(m.sigma_cond.is_finite() && m.sigma_cond < SIGMA_COND_LIMIT, "{:e}", m.sigma_cond);
        interior.push(sigma_interior_residual(&m.sigma, &d.sp, &d.decoupling.h0, &m.f_tilde, 0.05) / scale);
    }
    let ratio = interior[0] / interior[1];
    assert!(ratio >= 1.5, "{interior:?}");
}

#[test]
fn residual_matrix_is_block_triangular() {
    let (cfg, d) = designed(100);
    let m = closed_loop_model(&cfg.plant, &d).unwrap();
    let nx = cfg.plant.n_xi;
    assert_eq!(m.fsys.view((nx, 0), (nx, nx)).amax(), 0.0);
    let want: Vec<Complex64> = [-2.0, -3.0, -4.0, -5.0, -6.0, -7.0].iter().map(|&v| Complex64::new(v, 0.0)).collect();
    assert!(spectrum_distance(&eigenvalues(&m.fsys), &want) <= 1e-8);
    let diag = closed_loop_matrix(&cfg.plant, &d.k, &DMatrix::zeros(cfg.plant.n, nx), &d.observer.l_xi, d.observer.gamma.at(0));
    assert_eq!(diag.view((0, nx), (nx, nx)).amax(), 0.0);
}

#[test]
fn exact_observer_start_predicts_zero() {
    let (mut cfg, d) = designed(100);
    cfg.simulation.x0[0] = parse_expression("z").unwrap();
    cfg.simulation.x_hat0 = cfg.simulation.x0.clone();
    cfg.simulation.t_final = 6.0;
    let m = closed_loop_model(&cfg.plant, &d).unwrap();
    let recon = Reconstructor::new(&d).unwrap();
    let og = ObserverGains::from(&d.observer);
    let tr = simulate_closed_loop(&cfg.plant, &d.sp, Loop::Output(&d.gains, &og), &cfg.simulation).unwrap();
    let (tc, to) = settling_times(&cfg.plant, &d.grid);
    let rep = predict_post_settling(&m.sigma, &recon, &tr, tc + to).unwrap();
    // ε_ξ stays at rounding level, amplified by |Σ|
    assert!(rep.max_prediction < 1e-9, "{:e}", rep.max_prediction);
    // with no estimation error the target state decays with the controller poles
    let peak = (0..tr.len()).map(|s| recon.apply(&tr.x[s], &tr.xi[s]).amax()).fold(0.0, f64::max);
    let last = recon.apply(tr.x.last().unwrap(), tr.xi.last().unwrap()).amax();
    assert!(last < 1e-3 * peak, "{last:e} vs peak {peak:e}");
}

#[test]
fn window_past_the_trace_is_an_error() {
    let (mut cfg, d) = designed(60);
    cfg.simulation.t_final = 1.0;
    let m = closed_loop_model(&cfg.plant, &d).unwrap();
    let recon = Reconstructor::new(&d).unwrap();
    let og = ObserverGains::from(&d.observer);
    let tr = simulate_closed_loop(&cfg.plant, &d.sp, Loop::Output(&d.gains, &og), &cfg.simulation).unwrap();
    let err = predict_post_settling(&m.sigma, &recon, &tr, 2.0).unwrap_err();
    assert!(matches!(err, AnalysisError::TraceTooShort { .. }));
}

#[test]
fn target_map_inverts_on_smooth_states() {
    // T₂ is the identity outside the p×p block and T₁ starts with x at z = 0
    let (cfg, d) = designed(60);
    let recon = Reconstructor::new(&d).unwrap();
    let x = DMatrix::from_fn(cfg.plant.n, d.grid.len(), |i, k| (i as f64 + d.grid.z(k)).sin());
    let xi = nalgebra::DVector::from_column_slice(&[0.1, 0.2, -0.3]);
    let e = recon.apply(&x, &xi);
    let want = x.column(0) - d.decoupling.n_i.at(0) * &xi;
    assert!((e.column(0) - want).amax() < 1e-14);
}
