//! The design-output file and the residual gates recorded in it.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{closed_loop_model, sigma_boundary_residuals, AnalysisError, ClosedLoopModel};
use crate::config::{config_to_string, Config};
use crate::decoupling::{hvol_residual, p1row_residual};
use crate::design::Design;
use crate::kernel::{boundary_residual, diagonal_residual};
use crate::linalg::{eigenvalues, spectrum_distance};
use crate::model::{Grid, SpatialMatrixFunction};
use crate::observer::{
    gamma_boundary_residuals, observer_boundary_residual, observer_diagonal_residual, reciprocity_residual,
    ObservabilityReport,
};

pub const FORMAT: &str = "hypode-design/1";

pub type Matrix = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Matrix {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &Matrix) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

fn field_rows(f: &SpatialMatrixFunction) -> Vec<Matrix> {
    f.values().iter().map(to_rows).collect()
}

fn pairs(v: &[Complex64]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = v.iter().map(|c| [c.re, c.im]).collect();
    out.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    out
}

pub fn complex(v: &[[f64; 2]]) -> Vec<Complex64> {
    v.iter().map(|p| Complex64::new(p[0], p[1])).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub grid: usize,
    pub seed: u64,
    pub kernel_tol: f64,
    pub kernel_max_iter: usize,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub requested: Vec<[f64; 2]>,
    pub achieved: Vec<[f64; 2]>,
    pub distance: f64,
}

impl SpectrumReport {
    fn new(requested: &[Complex64], m: &DMatrix<f64>) -> Self {
        let achieved = eigenvalues(m);
        SpectrumReport {
            requested: pairs(requested),
            distance: spectrum_distance(&achieved, requested),
            achieved: pairs(&achieved),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerOutput {
    pub k: Matrix,
    pub k_xi: Matrix,
    /// K_x at the grid nodes, p×n each.
    pub k_x: Vec<Matrix>,
    pub spectrum: SpectrumReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverOutput {
    pub l_xi: Matrix,
    /// L at the grid nodes, n×p each.
    pub l: Vec<Matrix>,
    /// E₁ᵀΓ(0)
    pub gamma0: Matrix,
    pub gamma_cond: f64,
    pub observability: ObservabilityReport,
    pub spectrum: SpectrumReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Gate {
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Gate {
            name: name.into(),
            value,
            limit,
            pass: value.is_finite() && value <= limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub kernel_sweeps: usize,
    pub observer_kernel_sweeps: usize,
    pub sigma_cond: f64,
    pub closed_loop: SpectrumReport,
    pub gates: Vec<Gate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignOutput {
    pub format: String,
    pub provenance: Provenance,
    pub controller: ControllerOutput,
    pub observer: ObserverOutput,
    pub diagnostics: Diagnostics,
}

/// Hash of the canonical text of a configuration.
pub fn config_hash(cfg: &Config) -> String {
    let digest = Sha256::digest(config_to_string(cfg).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Residual gates of a finished design.
pub fn design_gates(cfg: &Config, d: &Design, model: &ClosedLoopModel) -> Vec<Gate> {
    let spec = &cfg.plant;
    let p = spec.p;
    let lambda0: Vec<f64> = d.sp.lambda.iter().map(|l| l[0]).collect();
    let a_fn = |i: usize, j: usize, z: f64| spec.a[i][j].eval_unchecked(z);
    let ob = &d.observer;
    let dec = &d.decoupling;
    let (g0, g1) = gamma_boundary_residuals(spec, &ob.gamma, &ob.kernel.s);
    let (s0, s1) = sigma_boundary_residuals(&model.sigma, &spec.q0, &model.q1_tilde);
    vec![
        Gate::at_most("controller kernel boundary", boundary_residual(&d.kernel, &lambda0, &spec.q0, p), 1e-8),
        Gate::at_most("controller kernel diagonal", diagonal_residual(&d.kernel, p, &d.sp.lambda, &a_fn), 1e-8),
        Gate::at_most("decoupling h volterra", hvol_residual(spec, &d.sp, &dec.n_i, &d.a0, &dec.p_i, &dec.h0), 1e-8),
        Gate::at_most("P(1,.) reciprocity", p1row_residual(&dec.p_i, &dec.p1row, p), 1e-10),
        Gate::at_most("observer kernel boundary", observer_boundary_residual(&ob.kernel.r_i, &ob.kernel.s, &spec.q1, p), 1e-8),
        Gate::at_most("observer kernel diagonal", observer_diagonal_residual(&ob.kernel.r_i, p, &d.sp), 1e-8),
        Gate::at_most("R(z,0) transformation identity", reciprocity_residual(&ob.r, &ob.kernel.r_i, true), 1e-8),
        Gate::at_most("Gamma boundary z=0", g0, 1e-6),
        Gate::at_most("Gamma boundary z=1", g1, 1e-6),
        Gate::at_most("Sigma boundary z=0", s0, 1e-6),
        Gate::at_most("Sigma boundary z=1", s1, 1e-6),
        Gate::at_most(
            "controller poles",
            spectrum_distance(&eigenvalues(&(&spec.f - &spec.b * &d.k)), &cfg.design.controller_poles),
            1e-8,
        ),
        Gate::at_most("observer poles", spectrum_distance(&eigenvalues(&model.f_tilde), &cfg.design.observer_poles), 1e-8),
        Gate::at_most("closed-loop separation", separation_distance(cfg, &model.fsys), 1e-8),
    ]
}

fn union_poles(cfg: &Config) -> Vec<Complex64> {
    let mut all = cfg.design.controller_poles.clone();
    all.extend(cfg.design.observer_poles.iter().copied());
    all
}

fn separation_distance(cfg: &Config, fsys: &DMatrix<f64>) -> f64 {
    spectrum_distance(&eigenvalues(fsys), &union_poles(cfg))
}

impl DesignOutput {
    pub fn build(cfg: &Config, d: &Design) -> Result<Self, AnalysisError> {
        let spec = &cfg.plant;
        let model = closed_loop_model(spec, d)?;
        let gates = design_gates(cfg, d, &model);
        let ob = &d.observer;
        Ok(DesignOutput {
            format: FORMAT.into(),
            provenance: Provenance {
                config_sha256: config_hash(cfg),
                grid: cfg.design.grid,
                seed: cfg.design.seed,
                kernel_tol: cfg.design.kernel_tol,
                kernel_max_iter: cfg.design.kernel_max_iter,
                version: env!("CARGO_PKG_VERSION").into(),
            },
            controller: ControllerOutput {
                k: to_rows(&d.k),
                k_xi: to_rows(&d.gains.k_xi),
                k_x: field_rows(&d.gains.k_x),
                spectrum: SpectrumReport::new(&cfg.design.controller_poles, &(&spec.f - &spec.b * &d.k)),
            },
            observer: ObserverOutput {
                l_xi: to_rows(&ob.l_xi),
                l: field_rows(&ob.l),
                gamma0: to_rows(&ob.gamma.at(0).rows(0, spec.p).into_owned()),
                gamma_cond: ob.gamma_cond,
                observability: ob.observability.clone(),
                spectrum: SpectrumReport::new(&cfg.design.observer_poles, &model.f_tilde),
            },
            diagnostics: Diagnostics {
                kernel_sweeps: d.kernel_stats.sweeps.iter().sum(),
                observer_kernel_sweeps: ob.kernel.stats.sweeps.iter().sum(),
                sigma_cond: model.sigma_cond,
                closed_loop: SpectrumReport::new(&union_poles(cfg), &model.fsys),
                gates,
            },
        })
    }

    pub fn passed(&self) -> bool {
        self.diagnostics.gates.iter().all(|g| g.pass)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("design output serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn grid(&self) -> Grid {
        Grid::unchecked(self.provenance.grid)
    }

    pub fn feedback_gains(&self) -> crate::decoupling::FeedbackGains {
        let grid = self.grid();
        crate::decoupling::FeedbackGains {
            k_xi: from_rows(&self.controller.k_xi),
            k_x: SpatialMatrixFunction::from_values(grid, self.controller.k_x.iter().map(from_rows).collect()),
        }
    }

    pub fn observer_gains(&self) -> crate::simulator::ObserverGains {
        let grid = self.grid();
        crate::simulator::ObserverGains {
            l_xi: from_rows(&self.observer.l_xi),
            l: SpatialMatrixFunction::from_values(grid, self.observer.l.iter().map(from_rows).collect()),
        }
    }

    /// K_x rows over the grid: z, then the p×n entries row-major.
    pub fn gains_csv(&self) -> String {
        nodal_csv(self.grid(), &self.controller.k_x, "k")
    }

    pub fn observer_gain_csv(&self) -> String {
        nodal_csv(self.grid(), &self.observer.l, "l")
    }
}

fn nodal_csv(grid: Grid, field: &[Matrix], name: &str) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("z");
    if let Some(m) = field.first() {
        for i in 0..m.len() {
            for j in 0..m[i].len() {
                let _ = write!(out, ",{name}_{}{}", i + 1, j + 1);
            }
        }
    }
    out.push('\n');
    for (k, m) in field.iter().enumerate() {
        let _ = write!(out, "{:e}", grid.z(k));
        for v in m.iter().flatten() {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    out
}
