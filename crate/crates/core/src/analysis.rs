//! Closed-loop verification: the decoupling matrix Σ of the error
//! cascade, the finite-dimensional residual dynamics and the post-settling
//! prediction e_x = Σε_ξ.

use nalgebra::{DMatrix, DVector};

use crate::characteristics::CharTable;
use crate::decoupling::{compute_p_full, DecouplingError, FeedbackGains};
use crate::design::Design;
use crate::kernel::KernelField;
use crate::linalg::cond;
use crate::model::{PlantSpec, SampledPlant, SpatialMatrixFunction};
use crate::propagate::Propagator;
use crate::simulator::SimTrace;

pub const SIGMA_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("linear system for Sigma(0) is ill-conditioned (condition {cond:e})")]
    SigmaSystem { cond: f64 },
    #[error(transparent)]
    Decoupling(#[from] DecouplingError),
    #[error("trace ends at t = {t_end} before the prediction window starts at {t_start}")]
    TraceTooShort { t_start: f64, t_end: f64 },
}

fn trap(h: f64, lo: usize, hi: usize, c: usize) -> f64 {
    if lo == hi {
        0.0
    } else if c == lo || c == hi {
        0.5 * h
    } else {
        h
    }
}

/// f(z) + sign·∫₀ᶻ k(z,ζ)f(ζ)dζ at every node.
pub fn volterra_apply(k: &KernelField, f: &SpatialMatrixFunction, sign: f64) -> SpatialMatrixFunction {
    let grid = *f.grid();
    let h = grid.h();
    SpatialMatrixFunction::from_fn(grid, |a| {
        let mut m = f.at(a).clone();
        for b in 0..=a {
            let w = trap(h, 0, a, b);
            if w != 0.0 {
                m += k.matrix(a, b) * f.at(b) * (sign * w);
            }
        }
        m
    })
}

fn volterra_apply_mat(k: &KernelField, f: &DMatrix<f64>, sign: f64) -> DMatrix<f64> {
    let h = k.grid().h();
    let mut out = f.clone();
    for a in 0..f.ncols() {
        for b in 0..=a {
            let w = trap(h, 0, a, b);
            if w != 0.0 {
                let v = k.matrix(a, b) * f.column(b) * (sign * w);
                let mut col = out.column_mut(a);
                col += v;
            }
        }
    }
    out
}

/// Q̃₁ = Q₁E₂ᵀT_o⁻¹[Γ](1) + K_ξ + ∫₀¹K_x T_o⁻¹[Γ] dz.
pub fn q1_tilde(spec: &PlantSpec, gains: &FeedbackGains, r_i: &KernelField, gamma: &SpatialMatrixFunction) -> DMatrix<f64> {
    let grid = *gamma.grid();
    let last = grid.cells();
    let p = spec.p;
    let ginv = volterra_apply(r_i, gamma, -1.0);
    let mut q = &spec.q1 * ginv.at(last).rows(p, spec.m()) + &gains.k_xi;
    for a in 0..grid.len() {
        q += gains.k_x.at(a) * ginv.at(a) * trap(grid.h(), 0, last, a);
    }
    q
}

#[derive(Debug, Clone)]
pub struct SigmaSolution {
    pub sigma: SpatialMatrixFunction,
    /// Condition number of the map E₁ᵀΣ(0) ↦ E₁ᵀΣ(1).
    pub cond: f64,
}

/// Σ from ΛΣ′ = ΣF̃ − H₀E₁ᵀΣ(0), E₂ᵀΣ(0) = Q₀E₁ᵀΣ(0), E₁ᵀΣ(1) = Q̃₁.
/// Σ depends linearly on X = E₁ᵀΣ(0); the map X ↦ E₁ᵀΣ(1) is assembled
/// column by column and inverted.
pub fn solve_sigma(
    spec: &PlantSpec,
    sp: &SampledPlant,
    h0: &SpatialMatrixFunction,
    f_tilde: &DMatrix<f64>,
    q1t: &DMatrix<f64>,
) -> Result<SigmaSolution, AnalysisError> {
    let grid = sp.grid;
    let (n, p, nx) = (spec.n, spec.p, spec.n_xi);
    let last = grid.cells();
    let table = CharTable::from_plant(sp, p);
    let mut prop = Propagator::new(f_tilde, grid.h());
    let mut sweep = |x: &DMatrix<f64>| -> Vec<DMatrix<f64>> {
        let mut init = DMatrix::zeros(n, nx);
        init.rows_mut(0, p).copy_from(x);
        init.rows_mut(p, n - p).copy_from(&(&spec.q0 * x));
        let mut out = vec![DMatrix::zeros(n, nx); grid.len()];
        for r in 0..n {
            let f: Vec<DMatrix<f64>> = (0..grid.len())
                .map(|b| -(h0.at(b).rows(r, 1) * x) / sp.lambda[r][b])
                .collect();
            let rows = prop.solve(table.nodes(r), &init.rows(r, 1).into_owned(), &f);
            for (b, v) in rows.into_iter().enumerate() {
                out[b].rows_mut(r, 1).copy_from(&v);
            }
        }
        out
    };
    let dim = p * nx;
    let mut map = DMatrix::zeros(dim, dim);
    for c in 0..dim {
        let mut x = DMatrix::zeros(p, nx);
        x[(c / nx, c % nx)] = 1.0;
        let end = &sweep(&x)[last];
        for r in 0..dim {
            map[(r, c)] = end[(r / nx, r % nx)];
        }
    }
    let kappa = cond(&map);
    if !kappa.is_finite() || kappa > SIGMA_COND_LIMIT {
        return Err(AnalysisError::SigmaSystem { cond: kappa });
    }
    let rhs = DVector::from_fn(dim, |r, _| q1t[(r / nx, r % nx)]);
    let sol = map.lu().solve(&rhs).ok_or(AnalysisError::SigmaSystem { cond: f64::INFINITY })?;
    let x = DMatrix::from_fn(p, nx, |i, j| sol[i * nx + j]);
    Ok(SigmaSolution {
        sigma: SpatialMatrixFunction::from_values(grid, sweep(&x)),
        cond: kappa,
    })
}

/// (‖(E₂ᵀ − Q₀E₁ᵀ)Σ(0)‖, ‖E₁ᵀΣ(1) − Q̃₁‖), max norms.
pub fn sigma_boundary_residuals(sigma: &SpatialMatrixFunction, q0: &DMatrix<f64>, q1t: &DMatrix<f64>) -> (f64, f64) {
    let p = q1t.nrows();
    let n = sigma.shape().0;
    let s0 = sigma.at(0);
    let s1 = sigma.at(sigma.grid().cells());
    let r0 = s0.rows(p, n - p) - q0 * s0.rows(0, p);
    let r1 = s1.rows(0, p) - q1t;
    (r0.amax(), r1.amax())
}

/// Sup of ΛΣ′ − ΣF̃ + H₀E₁ᵀΣ(0) with central differences, skipping nodes
/// within `band` of a jump of H₀ or the ends.
pub fn sigma_interior_residual(
    sigma: &SpatialMatrixFunction,
    sp: &SampledPlant,
    h0: &SpatialMatrixFunction,
    f_tilde: &DMatrix<f64>,
    band: f64,
) -> f64 {
    let grid = sp.grid;
    let h = grid.h();
    let p = h0.shape().1;
    let x = sigma.at(0).rows(0, p).into_owned();
    let skip = (band / h).ceil() as usize;
    let jumps: Vec<usize> = (1..grid.cells())
        .filter(|&k| {
            let d1 = (h0.at(k + 1) - h0.at(k)).amax();
            let d0 = (h0.at(k) - h0.at(k - 1)).amax();
            d1 > 10.0 * d0.max(h) || d0 > 10.0 * d1.max(h)
        })
        .collect();
    let mut worst = 0.0_f64;
    for k in skip.max(1)..grid.cells().saturating_sub(skip.max(1) - 1) {
        if jumps.iter().any(|&j| j.abs_diff(k) <= skip) {
            continue;
        }
        let d = (sigma.at(k + 1) - sigma.at(k - 1)) / (2.0 * h);
        let r = sp.lambda_diag(k) * d - sigma.at(k) * f_tilde + h0.at(k) * &x;
        worst = worst.max(r.amax());
    }
    worst
}

/// [[F − BK, BE₁ᵀΣ(0)], [0, F − L_ξE₁ᵀΓ(0)]].
pub fn closed_loop_matrix(
    spec: &PlantSpec,
    k: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    l_xi: &DMatrix<f64>,
    gamma0: &DMatrix<f64>,
) -> DMatrix<f64> {
    let nx = spec.n_xi;
    let p = spec.p;
    let mut m = DMatrix::zeros(2 * nx, 2 * nx);
    m.view_mut((0, 0), (nx, nx)).copy_from(&(&spec.f - &spec.b * k));
    m.view_mut((0, nx), (nx, nx)).copy_from(&(&spec.b * sigma0.rows(0, p)));
    m.view_mut((nx, nx), (nx, nx)).copy_from(&(&spec.f - l_xi * gamma0.rows(0, p)));
    m
}

#[derive(Debug, Clone)]
pub struct ClosedLoopModel {
    pub sigma: SpatialMatrixFunction,
    pub sigma_cond: f64,
    pub q1_tilde: DMatrix<f64>,
    pub f_tilde: DMatrix<f64>,
    pub fsys: DMatrix<f64>,
}

pub fn closed_loop_model(spec: &PlantSpec, d: &Design) -> Result<ClosedLoopModel, AnalysisError> {
    let ob = &d.observer;
    let f_tilde = &spec.f - &ob.l_xi * ob.gamma.at(0).rows(0, spec.p);
    let q1t = q1_tilde(spec, &d.gains, &ob.kernel.r_i, &ob.gamma);
    let sol = solve_sigma(spec, &d.sp, &d.decoupling.h0, &f_tilde, &q1t)?;
    let fsys = closed_loop_matrix(spec, &d.k, sol.sigma.at(0), &ob.l_xi, ob.gamma.at(0));
    Ok(ClosedLoopModel {
        sigma: sol.sigma,
        sigma_cond: sol.cond,
        q1_tilde: q1t,
        f_tilde,
        fsys,
    })
}

/// The state map x ↦ e_x = T₂[T₁[x] − N_Iξ] of the decoupled target
/// coordinates.
#[derive(Debug, Clone)]
pub struct Reconstructor {
    kernel: KernelField,
    n_i: SpatialMatrixFunction,
    p_full: KernelField,
}

impl Reconstructor {
    pub fn new(d: &Design) -> Result<Self, AnalysisError> {
        Ok(Reconstructor {
            kernel: d.kernel.clone(),
            n_i: d.decoupling.n_i.clone(),
            p_full: compute_p_full(&d.decoupling.p_i, d.decoupling.p)?,
        })
    }

    /// n×(N+1) target state for a snapshot.
    pub fn apply(&self, x: &DMatrix<f64>, xi: &DVector<f64>) -> DMatrix<f64> {
        let mut w = volterra_apply_mat(&self.kernel, x, -1.0);
        for a in 0..w.ncols() {
            let v = self.n_i.at(a) * xi;
            let mut col = w.column_mut(a);
            col -= v;
        }
        volterra_apply_mat(&self.p_full, &w, -1.0)
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PredictionReport {
    pub t_start: f64,
    pub t_end: f64,
    pub samples: usize,
    /// max over the window of sup_z |e_x − Σε_ξ|
    pub max_deviation: f64,
    /// max over the window of sup_z |Σε_ξ|
    pub max_prediction: f64,
    pub relative: f64,
}

/// Compares e_x with Σε_ξ on the samples with t ≥ t_start.
pub fn predict_post_settling(
    sigma: &SpatialMatrixFunction,
    recon: &Reconstructor,
    trace: &SimTrace,
    t_start: f64,
) -> Result<PredictionReport, AnalysisError> {
    let t_end = trace.t.last().copied().unwrap_or(0.0);
    let idx: Vec<usize> = (0..trace.len()).filter(|&s| trace.t[s] >= t_start).collect();
    if idx.is_empty() || trace.xi_hat.is_empty() {
        return Err(AnalysisError::TraceTooShort { t_start, t_end });
    }
    let grid = *sigma.grid();
    let (mut dev, mut pred) = (0.0_f64, 0.0_f64);
    for &s in &idx {
        let e = recon.apply(&trace.x[s], &trace.xi[s]);
        let eps = &trace.xi[s] - &trace.xi_hat[s];
        for a in 0..grid.len() {
            let sv = sigma.at(a) * &eps;
            pred = pred.max(sv.amax());
            dev = dev.max((e.column(a) - sv).amax());
        }
    }
    Ok(PredictionReport {
        t_start,
        t_end,
        samples: idx.len(),
        max_deviation: dev,
        max_prediction: pred,
        relative: if pred > 0.0 { dev / pred } else { dev },
    })
}
