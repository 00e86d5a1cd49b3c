use hypode::config::{load_config, parse_config, Config};
use hypode::linalg::{eigenvalues, spectrum_distance};
use hypode::model::{Grid, SampledPlant, SpatialMatrixFunction};
use hypode::observer::*;
use hypode::kernel::KernelField;
use hypode::propagate::rk4_rows;
use nalgebra::DMatrix;

fn paper(n: usize) -> Config {
    let mut cfg = load_config(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper_example.toml")).unwrap();
    cfg.design.grid = n;
    cfg
}

fn sampled(cfg: &Config) -> SampledPlant {
    cfg.plant.sample(&Grid::new(cfg.design.grid).unwrap())
}

const SMALL: &str = r#"
[dimensions]
n = 3
p = 1
n_xi = 2
[lambda]
values = [2, -1, "-1.5 - 0.5*z"]
[A]
rows = [[0, 0, 0], [0, 0, 0], [0, 0, 0]]
[C1]
rows = [["z", 0], [0, 1], ["sin(z)", 0]]
[boundary]
Q0 = [[1], [0.5]]
Q1 = [[0.5, -1]]
C2 = [[0, 0], [0, 0]]
[ode]
F = [[0, 1], [-1, 0]]
B = [[0], [1]]
[design]
controller_poles = [-1, -2]
observer_poles = [-3, -4]
grid = 40
"#;

#[test]
fn zero_coupling_gives_zero_kernel() {
    let cfg = parse_config(SMALL).unwrap();
    let ok = solve_observer_kernel(&cfg.plant, &cfg.design).unwrap();
    assert_eq!(ok.r_i.sup_norm(), 0.0);
    assert_eq!(ok.s.sup_norm(), 0.0);
    let r = compute_r(&ok.r_i).unwrap();
    assert_eq!(r.sup_norm(), 0.0);
    // R ≡ 0: G_o = C₁
    let sp = sampled(&cfg);
    let g_o = compute_go(&r, &cfg.plant, &sp);
    for k in 0..sp.grid.len() {
        assert_eq!(g_o.at(k), sp.c1.at(k));
    }
}

#[test]
fn kernel_conditions_on_paper_example() {
    let cfg = paper(100);
    let sp = sampled(&cfg);
    let ok = solve_observer_kernel(&cfg.plant, &cfg.design).unwrap();
    let p = cfg.plant.p;
    let bc = observer_boundary_residual(&ok.r_i, &ok.s, &cfg.plant.q1, p);
    assert!(bc <= 1e-8, "boundary residual {bc}");
    let diag = observer_diagonal_residual(&ok.r_i, p, &sp);
    assert!(diag <= 1e-10, "diagonal residual {diag}");
    for b in 0..sp.grid.len() {
        let s = ok.s.at(b);
        for i in 0..p {
            for j in 0..=i {
                assert_eq!(s[(i, j)], 0.0);
            }
        }
    }
}

#[test]
fn interior_residual_halves_under_refinement() {
    let r1 = {
        let cfg = paper(100);
        let ok = solve_observer_kernel(&cfg.plant, &cfg.design).unwrap();
        observer_interior_residual(&ok, &cfg.plant, 0.05).0
    };
    let r2 = {
        let cfg = paper(200);
        let ok = solve_observer_kernel(&cfg.plant, &cfg.design).unwrap();
        observer_interior_residual(&ok, &cfg.plant, 0.05).0
    };
    let ratio = r1 / r2;
    assert!((1.5..=2.5).contains(&ratio), "{r1} {r2} {ratio}");
}

#[test]
fn reciprocal_kernel_residuals() {
    let cfg = paper(80);
    let ok = solve_observer_kernel(&cfg.plant, &cfg.design).unwrap();
    let r = compute_r(&ok.r_i).unwrap();
    let full = reciprocity_residual(&r, &ok.r_i, false);
    assert!(full <= 1e-10, "{full}");
    let bottom = reciprocity_residual(&r, &ok.r_i, true);
    assert!(bottom <= 1e-8, "{bottom}");
    let zero = KernelField::zeros(*r.grid(), 4, 4);
    assert_eq!(compute_r(&zero).unwrap().sup_norm(), 0.0);
}

#[test]
fn go_reduces_without_distributed_input() {
    let cfg = paper(60);
    let sp = sampled(&cfg);
    let ok = solve_observer_kernel(&cfg.plant, &cfg.design).unwrap();
    let r = compute_r(&ok.r_i).unwrap();
    let g_o = compute_go(&r, &cfg.plant, &sp);
    let lam0 = sp.lambda_diag(0);
    let (n, p) = (cfg.plant.n, cfg.plant.p);
    for a in 0..sp.grid.len() {
        let want = -(r.matrix(a, 0) * &lam0).columns(p, n - p) * &cfg.plant.c2;
        assert!((g_o.at(a) - want).amax() < 1e-13);
    }
    let mut spec = cfg.plant.clone();
    spec.c2 = DMatrix::zeros(n - p, spec.n_xi);
    assert_eq!(compute_go(&r, &spec, &sp).sup_norm(), 0.0);
}

#[test]
fn gamma_boundary_conditions_and_shooting() {
    let cfg = paper(100);
    let spec = &cfg.plant;
    let sp = sampled(&cfg);
    let ok = solve_observer_kernel(spec, &cfg.design).unwrap();
    let r = compute_r(&ok.r_i).unwrap();
    let g_o = compute_go(&r, spec, &sp);
    let (gamma, c) = solve_gamma(spec, &sp, &g_o, &ok.s).unwrap();
    assert!(c < 1e8, "condition {c}");
    let (r0, r1) = gamma_boundary_residuals(spec, &gamma, &ok.s);
    assert!(r0 == 0.0, "{r0}");
    assert!(r1 <= 1e-6, "{r1}");
    let grid = sp.grid;
    for row in 0..spec.n {
        let lam = sp.lambda[row][0];
        let f = |z: f64| {
            let (k, t) = grid.locate(z);
            -(g_o.at(k).rows(row, 1) * (1.0 - t) + g_o.at(k + 1).rows(row, 1) * t) / lam
        };
        let v0 = gamma.at(0).rows(row, 1).into_owned();
        let rk = rk4_rows(&spec.f, |_| 1.0 / lam, f, &v0, grid.h(), grid.cells(), 8);
        for b in 0..grid.len() {
            let d = (gamma.at(b).rows(row, 1) - &rk[b]).amax();
            assert!(d < 1e-6, "row {row} node {b}: {d}");
        }
    }
}

#[test]
fn gamma_vanishes_for_zero_data() {
    let cfg = parse_config(SMALL).unwrap();
    let mut spec = cfg.plant.clone();
    spec.q1 = DMatrix::zeros(1, 2);
    let sp = sampled(&cfg);
    let g_o = SpatialMatrixFunction::zeros(sp.grid, 3, 2);
    let s = SpatialMatrixFunction::zeros(sp.grid, 1, 3);
    let (gamma, _) = solve_gamma(&spec, &sp, &g_o, &s).unwrap();
    assert_eq!(gamma.sup_norm(), 0.0);
}

#[test]
fn observability_examples() {
    let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    let rep = check_observability(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), &f);
    assert!(!rep.observable);
    assert_eq!(rep.method, ObservabilityMethod::Eigenvectors);
    assert_eq!(rep.modes.iter().filter(|m| !m.ok).count(), 1);
    let rep = check_observability(&DMatrix::zeros(2, 2), &f);
    assert!(!rep.observable && rep.modes.iter().all(|m| m.value == 0.0));
    let rep = check_observability(&DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), &f);
    assert!(rep.observable);
    // Jordan block: PBH fallback
    let j = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    let rep = check_observability(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), &j);
    assert_eq!(rep.method, ObservabilityMethod::Pbh);
    assert!(rep.observable);
    let rep = check_observability(&DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), &j);
    assert!(!rep.observable);
}

#[test]
fn paper_example_observer_design() {
    let cfg = paper(100);
    let spec = &cfg.plant;
    let sp = sampled(&cfg);
    let d = design_observer(spec, &sp, &cfg.design).unwrap();
    assert!(d.observability.observable);
    let c = d.gamma.at(0).rows(0, spec.p).into_owned();
    let ev = eigenvalues(&(&spec.f - &d.l_xi * &c));
    let dist = spectrum_distance(&ev, &cfg.design.observer_poles);
    assert!(dist < 1e-8, "{dist} {ev:?} {c} {}", d.l_xi);
    // L_ξ = 0 leaves only the kernel trace
    let zero = DMatrix::zeros(spec.n_xi, spec.p);
    let l = observer_gain_field(&d.gamma, &d.kernel.r_i, &sp, &zero, spec.p);
    let lam0 = sp.lambda_diag(0);
    for a in 0..sp.grid.len() {
        let want = -(d.kernel.r_i.matrix(a, 0) * &lam0).columns(0, spec.p).into_owned();
        assert!((l.at(a) - want).amax() < 1e-13);
    }
    // R_I ≡ 0 and constant Γ: L = ΓL_ξ
    let rz = KernelField::zeros(sp.grid, spec.n, spec.n);
    let g = SpatialMatrixFunction::from_fn(sp.grid, |_| d.gamma.at(0).clone());
    let l = observer_gain_field(&g, &rz, &sp, &d.l_xi, spec.p);
    for a in 0..sp.grid.len() {
        assert!((l.at(a) - d.gamma.at(0) * &d.l_xi).amax() < 1e-13);
    }
}
