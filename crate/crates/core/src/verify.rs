//! Independent re-check of a stored design against its configuration.

use std::fmt;

use serde::Serialize;

use crate::config::Config;
use crate::design::{run_design, DesignError};
use crate::kernel::{interior_residual, solve_controller_kernel};
use crate::linalg::{eigenvalues, spectrum_distance};
use crate::model::{Grid, MIN_GRID};
use crate::output::{config_hash, design_gates, from_rows, DesignOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub value: Option<f64>,
    pub limit: Option<f64>,
    pub detail: String,
}

impl Check {
    fn bound(name: &str, value: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            status: if value.is_finite() && value <= limit { Status::Pass } else { Status::Fail },
            value: Some(value),
            limit: Some(limit),
            detail: String::new(),
        }
    }

    fn flag(name: &str, ok: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            value: None,
            limit: None,
            detail,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| c.status == Status::Fail)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("check,status,value,limit\n");
        let num = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for c in &self.checks {
            let status = match c.status {
                Status::Pass => "pass",
                Status::Fail => "fail",
                Status::Skipped => "skipped",
            };
            out.push_str(&format!("{},{status},{},{}\n", c.name, num(c.value), num(c.limit)));
        }
        out
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skipped => "SKIP",
            };
            write!(f, "{tag} {}", c.name)?;
            if let (Some(v), Some(l)) = (c.value, c.limit) {
                write!(f, ": {v:.3e} (limit {l:.1e})")?;
            }
            if !c.detail.is_empty() {
                write!(f, " [{}]", c.detail)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Largest entrywise difference relative to the larger sup norm.
fn rel_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0_f64;
    let mut scale = 0.0_f64;
    for (ma, mb) in a.iter().zip(b) {
        if ma.len() != mb.len() {
            return f64::INFINITY;
        }
        for (ra, rb) in ma.iter().zip(mb) {
            if ra.len() != rb.len() {
                return f64::INFINITY;
            }
            for (x, y) in ra.iter().zip(rb) {
                diff = diff.max((x - y).abs());
                scale = scale.max(x.abs()).max(y.abs());
            }
        }
    }
    if diff.is_nan() {
        f64::INFINITY
    } else {
        diff / scale.max(1.0)
    }
}

pub const GAIN_TOL: f64 = 1e-9;
const BAND: f64 = 0.05;

/// Controller kernel interior residual at N/2 over N; `None` when N/2 is
/// below the coarsest admissible grid.
pub fn kernel_self_convergence(cfg: &Config) -> Result<Option<(f64, f64)>, DesignError> {
    let n = cfg.design.grid;
    if n / 2 < MIN_GRID {
        return Ok(None);
    }
    let mut res = Vec::new();
    for cells in [n / 2, n] {
        let mut params = cfg.design.clone();
        params.grid = cells;
        let (k, _) = solve_controller_kernel(&cfg.plant, &params)?;
        let sp = cfg.plant.sample(&Grid::unchecked(cells));
        res.push(interior_residual(&k, cfg.plant.p, &sp.lambda, &sp.a, BAND).0);
    }
    Ok(Some((res[0], res[1])))
}

/// Recomputes the design of `cfg` and compares it with `stored`.
pub fn verify(cfg: &Config, stored: &DesignOutput) -> Result<VerifyReport, DesignError> {
    let mut checks = Vec::new();
    let hash = config_hash(cfg);
    checks.push(Check::flag(
        "provenance",
        stored.provenance.config_sha256 == hash && stored.provenance.grid == cfg.design.grid,
        format!("design grid {}, config grid {}", stored.provenance.grid, cfg.design.grid),
    ));

    let d = run_design(&cfg.plant, &cfg.design)?;
    let fresh = DesignOutput::build(cfg, &d)?;
    let model = crate::analysis::closed_loop_model(&cfg.plant, &d)?;
    for g in design_gates(cfg, &d, &model) {
        checks.push(Check::bound(&g.name, g.value, g.limit));
    }

    checks.push(Check::bound(
        "K_x, K_xi reciprocity with P(1,.)",
        rel_diff(&stored.controller.k_x, &fresh.controller.k_x)
            .max(rel_diff(&[stored.controller.k_xi.clone()], &[fresh.controller.k_xi.clone()])),
        GAIN_TOL,
    ));
    checks.push(Check::bound(
        "L, L_xi reciprocity with R",
        rel_diff(&stored.observer.l, &fresh.observer.l)
            .max(rel_diff(&[stored.observer.l_xi.clone()], &[fresh.observer.l_xi.clone()])),
        GAIN_TOL,
    ));

    let spec = &cfg.plant;
    let k = from_rows(&stored.controller.k);
    let ctrl = if k.shape() == (spec.p, spec.n_xi) {
        spectrum_distance(&eigenvalues(&(&spec.f - &spec.b * &k)), &cfg.design.controller_poles)
    } else {
        f64::INFINITY
    };
    checks.push(Check::bound("stored controller spectrum", ctrl, 1e-8));
    let l_xi = from_rows(&stored.observer.l_xi);
    let g0 = from_rows(&stored.observer.gamma0);
    let obs = if l_xi.shape() == (spec.n_xi, spec.p) && g0.shape() == (spec.p, spec.n_xi) {
        spectrum_distance(&eigenvalues(&(&spec.f - &l_xi * &g0)), &cfg.design.observer_poles)
    } else {
        f64::INFINITY
    };
    checks.push(Check::bound("stored observer spectrum", obs, 1e-8));

    match kernel_self_convergence(cfg)? {
        Some((coarse, fine)) => {
            let ratio = coarse / fine;
            checks.push(Check {
                name: "kernel self-convergence".into(),
                status: if (1.5..=2.5).contains(&ratio) { Status::Pass } else { Status::Fail },
                value: Some(ratio),
                limit: None,
                detail: format!("residual {coarse:.3e} at N/2, {fine:.3e} at N; ratio must lie in [1.5, 2.5]"),
            });
        }
        None => checks.push(Check {
            name: "kernel self-convergence".into(),
            status: Status::Skipped,
            value: None,
            limit: None,
            detail: format!("needs two resolutions, N/2 = {} is below {MIN_GRID}", cfg.design.grid / 2),
        }),
    }
    Ok(VerifyReport { checks })
}
