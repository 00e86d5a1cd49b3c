//! Time-domain simulation of the plant, the observer and the
//! output-feedback closed loop.
//!
//! PDEs use first-order upwind differences with explicit Euler steps, ODEs
//! classical RK4 with the boundary inputs frozen over a step.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::decoupling::FeedbackGains;
use crate::kernel::KernelField;
use crate::observer::ObserverDesign;
use crate::model::{Grid, PlantSpec, SampledPlant, ScalarFunction, SpatialMatrixFunction};

/// Simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cfl: f64,
    pub t_final: f64,
    pub x0: Vec<ScalarFunction>,
    pub xi0: Vec<f64>,
    pub x_hat0: Vec<ScalarFunction>,
    pub xi_hat0: Vec<f64>,
    /// Keep every k-th step in the trace.
    pub decimation: usize,
}

impl SimConfig {
    /// Zero initial data for a plant with `n` distributed and `n_xi` lumped states.
    pub fn zeros(n: usize, n_xi: usize) -> Self {
        SimConfig {
            cfl: 0.9,
            t_final: 6.0,
            x0: vec![ScalarFunction::zero(); n],
            xi0: vec![0.0; n_xi],
            x_hat0: vec![ScalarFunction::zero(); n],
            xi_hat0: vec![0.0; n_xi],
            decimation: 10,
        }
    }

    pub fn check(&self, n: usize, n_xi: usize) -> Result<(), String> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(format!("CFL number {} is outside (0, 1]", self.cfl));
        }
        if !(self.t_final > 0.0) {
            return Err(format!("final time {} must be positive", self.t_final));
        }
        if self.decimation == 0 {
            return Err("output decimation must be at least 1".into());
        }
        if self.x0.len() != n || self.x_hat0.len() != n {
            return Err(format!("distributed initial conditions need {n} entries"));
        }
        if self.xi0.len() != n_xi || self.xi_hat0.len() != n_xi {
            return Err(format!("lumped initial conditions need {n_xi} entries"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    Config(String),
    #[error("solution blew up after t = {t_last}")]
    BlowUp { t_last: f64 },
}

pub const BLOW_UP: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct ObserverGains {
    pub l_xi: DMatrix<f64>,
    /// n×p at every node.
    pub l: SpatialMatrixFunction,
}

impl From<&ObserverDesign> for ObserverGains {
    fn from(d: &ObserverDesign) -> Self {
        ObserverGains {
            l_xi: d.l_xi.clone(),
            l: d.l.clone(),
        }
    }
}

/// How the actuated boundary is driven.
#[derive(Debug, Clone, Copy)]
pub enum Loop<'a> {
    /// u ≡ 0.
    Open,
    /// Feedback of the true state.
    State(&'a FeedbackGains),
    /// Observer-based compensator.
    Output(&'a FeedbackGains, &'a ObserverGains),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    ClosedLoop,
    ErrorSystem,
}

/// Decimated simulation output. For the error system `x` and `xi` hold
/// ε_x and ε_ξ and the estimate fields stay empty.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub kind: TraceKind,
    pub grid: Grid,
    pub dt: f64,
    pub t: Vec<f64>,
    /// n×(N+1) snapshots.
    pub x: Vec<DMatrix<f64>>,
    pub x_hat: Vec<DMatrix<f64>>,
    pub xi: Vec<DVector<f64>>,
    pub xi_hat: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub eps_xi_norm: Vec<f64>,
    pub xi_norm: Vec<f64>,
    /// sup_{z,i} |x_i(z,t)|
    pub x_sup: Vec<f64>,
    /// sup_z |ε_{x_i}(z,t)| per component
    pub eps_x_sup: Vec<Vec<f64>>,
}

impl SimTrace {
    fn new(kind: TraceKind, grid: Grid, dt: f64) -> Self {
        SimTrace {
            kind,
            grid,
            dt,
            t: Vec::new(),
            x: Vec::new(),
            x_hat: Vec::new(),
            xi: Vec::new(),
            xi_hat: Vec::new(),
            u: Vec::new(),
            y: Vec::new(),
            eps_xi_norm: Vec::new(),
            xi_norm: Vec::new(),
            x_sup: Vec::new(),
            eps_x_sup: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Largest value of `series` at samples with t > `after`.
    pub fn max_after(series: &[f64], t: &[f64], after: f64) -> f64 {
        series
            .iter()
            .zip(t)
            .filter(|(_, &s)| s > after)
            .fold(0.0_f64, |m, (&v, _)| m.max(v))
    }

    pub fn peak(series: &[f64]) -> f64 {
        series.iter().fold(0.0_f64, |m, &v| m.max(v))
    }

    /// One row per output step: t, ξ, ξ̂, u, y and the norms.
    pub fn to_csv(&self) -> String {
        let nx = self.xi.first().map_or(0, |v| v.len());
        let p = self.u.first().map_or(0, |v| v.len());
        let n = self.eps_x_sup.first().map_or(0, |v| v.len());
        let mut out = String::from("t");
        let (xi_name, x_name) = match self.kind {
            TraceKind::ClosedLoop => ("xi", "x"),
            TraceKind::ErrorSystem => ("eps_xi", "eps_x"),
        };
        for k in 0..nx {
            let _ = write!(out, ",{xi_name}_{}", k + 1);
        }
        if !self.xi_hat.is_empty() {
            for k in 0..nx {
                let _ = write!(out, ",xi_hat_{}", k + 1);
            }
        }
        for k in 0..p {
            let _ = write!(out, ",u_{}", k + 1);
        }
        for k in 0..self.y.first().map_or(0, |v| v.len()) {
            let _ = write!(out, ",y_{}", k + 1);
        }
        let _ = write!(out, ",eps_xi_norm,xi_norm,{x_name}_sup");
        for k in 0..n {
            let _ = write!(out, ",eps_x{}_sup", k + 1);
        }
        out.push('\n');
        for s in 0..self.len() {
            let _ = write!(out, "{:e}", self.t[s]);
            let mut cols = |v: &DVector<f64>| {
                for x in v.iter() {
                    let _ = write!(out, ",{x:e}");
                }
            };
            cols(&self.xi[s]);
            if !self.xi_hat.is_empty() {
                cols(&self.xi_hat[s]);
            }
            if !self.u.is_empty() {
                cols(&self.u[s]);
            }
            if !self.y.is_empty() {
                cols(&self.y[s]);
            }
            let _ = write!(out, ",{:e},{:e},{:e}", self.eps_xi_norm[s], self.xi_norm[s], self.x_sup[s]);
            for v in &self.eps_x_sup[s] {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }

    /// Long-format snapshots: t, z, x_1..x_n.
    pub fn snapshots_csv(&self) -> String {
        let n = self.x.first().map_or(0, |m| m.nrows());
        let mut out = String::from("t,z");
        for i in 0..n {
            let _ = write!(out, ",x{}", i + 1);
        }
        out.push('\n');
        for (s, snap) in self.x.iter().enumerate() {
            for k in 0..self.grid.len() {
                let _ = write!(out, "{:e},{:e}", self.t[s], self.grid.z(k));
                for i in 0..n {
                    let _ = write!(out, ",{:e}", snap[(i, k)]);
                }
                out.push('\n');
            }
        }
        out
    }
}

fn trap_w(h: f64, last: usize, k: usize) -> f64 {
    if k == 0 || k == last {
        0.5 * h
    } else {
        h
    }
}

/// u = −Q₁x̂₂(1) − K_ξξ̂ − ∫₀¹K_x(z)x̂(z)dz, trapezoid quadrature.
pub fn evaluate_feedback(
    x_hat: &DMatrix<f64>,
    xi_hat: &DVector<f64>,
    gains: &FeedbackGains,
    q1: &DMatrix<f64>,
) -> DVector<f64> {
    let p = q1.nrows();
    let n = x_hat.nrows();
    let grid = *gains.k_x.grid();
    let last = grid.cells();
    let mut u = -(q1 * x_hat.view((p, last), (n - p, 1))).column(0).into_owned() - &gains.k_xi * xi_hat;
    for k in 0..grid.len() {
        u -= gains.k_x.at(k) * x_hat.column(k) * trap_w(grid.h(), last, k);
    }
    u
}

/// Inflow value x₁(1) = −K_ξξ − ∫K_x x with the node z = 1 of x₁ taken
/// implicitly.
fn implicit_inflow(x: &DMatrix<f64>, xi: &DVector<f64>, gains: &FeedbackGains, p: usize) -> DVector<f64> {
    let grid = *gains.k_x.grid();
    let last = grid.cells();
    let h = grid.h();
    let mut rhs = -(&gains.k_xi * xi);
    for k in 0..grid.len() {
        let w = trap_w(h, last, k);
        let kx = gains.k_x.at(k);
        if k == last {
            let n = x.nrows();
            rhs -= kx.columns(p, n - p) * x.view((p, k), (n - p, 1)) * w;
        } else {
            rhs -= kx * x.column(k) * w;
        }
    }
    let mut m = gains.k_x.at(last).columns(0, p) * (0.5 * h);
    for i in 0..p {
        m[(i, i)] += 1.0;
    }
    m.lu().solve(&rhs).expect("1 + (h/2)K_x(1) is singular")
}

fn rk4(f: &DMatrix<f64>, x: &DVector<f64>, g: &DVector<f64>, dt: f64) -> DVector<f64> {
    let rhs = |v: &DVector<f64>| f * v + g;
    let k1 = rhs(x);
    let k2 = rhs(&(x + &k1 * (0.5 * dt)));
    let k3 = rhs(&(x + &k2 * (0.5 * dt)));
    let k4 = rhs(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Upwind transport with zeroth-order terms.
struct Transport<'a> {
    n: usize,
    p: usize,
    grid: Grid,
    sp: &'a SampledPlant,
}

impl<'a> Transport<'a> {
    /// One explicit Euler step of ∂_t x = Λ∂_z x + A x + extra(k), leaving
    /// the inflow nodes to the boundary conditions.
    fn step(&self, x: &DMatrix<f64>, dt: f64, extra: impl Fn(usize) -> DVector<f64>) -> DMatrix<f64> {
        let h = self.grid.h();
        let last = self.grid.cells();
        let mut out = x.clone();
        for k in 0..self.grid.len() {
            let src = self.sp.a.at(k) * x.column(k) + extra(k);
            for i in 0..self.n {
                let lam = self.sp.lambda[i][k];
                let adv = if i < self.p {
                    if k == last {
                        continue;
                    }
                    lam * (x[(i, k + 1)] - x[(i, k)]) / h
                } else {
                    if k == 0 {
                        continue;
                    }
                    lam * (x[(i, k)] - x[(i, k - 1)]) / h
                };
                out[(i, k)] = x[(i, k)] + dt * (adv + src[i]);
            }
        }
        out
    }
}

fn sample_ic(f: &[ScalarFunction], grid: &Grid) -> DMatrix<f64> {
    DMatrix::from_fn(f.len(), grid.len(), |i, k| f[i].eval_unchecked(grid.z(k)))
}

fn time_step(sp: &SampledPlant, cfg: &SimConfig) -> (f64, usize) {
    let dt_max = cfg.cfl * sp.grid.h() / sp.max_speed();
    let steps = (cfg.t_final / dt_max).ceil().max(1.0) as usize;
    (cfg.t_final / steps as f64, steps)
}

fn sup(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

fn row_sups(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m.row(i).iter().fold(0.0_f64, |a, v| a.max(v.abs()))).collect()
}

/// Plant with the given loop; the observer runs only in [`Loop::Output`].
pub fn simulate_closed_loop(
    spec: &PlantSpec,
    sp: &SampledPlant,
    lp: Loop<'_>,
    cfg: &SimConfig,
) -> Result<SimTrace, SimError> {
    cfg.check(spec.n, spec.n_xi).map_err(SimError::Config)?;
    let (n, p) = (spec.n, spec.p);
    let grid = sp.grid;
    let last = grid.cells();
    let tr = Transport { n, p, grid, sp };
    let (dt, steps) = time_step(sp, cfg);
    let mut x = sample_ic(&cfg.x0, &grid);
    let mut xi = DVector::from_column_slice(&cfg.xi0);
    let observer = matches!(lp, Loop::Output(..));
    let mut xh = sample_ic(&cfg.x_hat0, &grid);
    let mut xih = DVector::from_column_slice(&cfg.xi_hat0);
    let mut u = DVector::zeros(p);
    let mut trace = SimTrace::new(TraceKind::ClosedLoop, grid, dt);
    let record = |tr: &mut SimTrace, t: f64, x: &DMatrix<f64>, xh: &DMatrix<f64>, xi: &DVector<f64>, xih: &DVector<f64>, u: &DVector<f64>| {
        let y = x.view((0, 0), (p, 1)).column(0).into_owned();
        tr.t.push(t);
        tr.eps_xi_norm.push(if observer { (xi - xih).norm() } else { 0.0 });
        tr.xi_norm.push(xi.norm());
        tr.x_sup.push(sup(x));
        tr.eps_x_sup.push(if observer { row_sups(&(x - xh)) } else { vec![0.0; x.nrows()] });
        tr.x.push(x.clone());
        tr.xi.push(xi.clone());
        if observer {
            tr.x_hat.push(xh.clone());
            tr.xi_hat.push(xih.clone());
        }
        tr.u.push(u.clone());
        tr.y.push(y);
    };
    record(&mut trace, 0.0, &x, &xh, &xi, &xih, &u);
    for s in 1..=steps {
        let t = s as f64 * dt;
        let y = x.view((0, 0), (p, 1)).column(0).into_owned();
        let by = &spec.b * &y;
        let c1xi: Vec<DVector<f64>> = (0..grid.len()).map(|k| sp.c1.at(k) * &xi).collect();
        let x_new = tr.step(&x, dt, |k| c1xi[k].clone());
        let xi_new = rk4(&spec.f, &xi, &by, dt);
        let (xh_new, xih_new) = if let Loop::Output(_, og) = lp {
            let innov = &y - xh.view((0, 0), (p, 1)).column(0);
            let c1h: Vec<DVector<f64>> = (0..grid.len()).map(|k| sp.c1.at(k) * &xih).collect();
            let xh_new = tr.step(&xh, dt, |k| &c1h[k] + og.l.at(k) * &innov);
            let g = &by + &og.l_xi * &innov;
            (xh_new, rk4(&spec.f, &xih, &g, dt))
        } else {
            (xh.clone(), xih.clone())
        };
        x = x_new;
        xi = xi_new;
        xh = xh_new;
        xih = xih_new;
        // x₁(0) is outflow; then the unactuated and actuated boundaries
        let y_new = x.view((0, 0), (p, 1)).column(0).into_owned();
        let x2_0 = &spec.q0 * &y_new + &spec.c2 * &xi;
        x.view_mut((p, 0), (n - p, 1)).copy_from(&x2_0);
        let x2_1 = x.view((p, last), (n - p, 1)).column(0).into_owned();
        match lp {
            Loop::Open => u.fill(0.0),
            Loop::State(cg) => {
                x.view_mut((0, last), (p, 1)).copy_from(&(&spec.q1 * &x2_1));
                let x1 = implicit_inflow(&x, &xi, cg, p);
                u = &x1 - &spec.q1 * &x2_1;
            }
            Loop::Output(cg, _) => {
                let xh2_0 = &spec.q0 * &y_new + &spec.c2 * &xih;
                xh.view_mut((p, 0), (n - p, 1)).copy_from(&xh2_0);
                let xh2_1 = xh.view((p, last), (n - p, 1)).column(0).into_owned();
                let x1 = implicit_inflow(&xh, &xih, cg, p);
                xh.view_mut((0, last), (p, 1)).copy_from(&x1);
                u = &x1 - &spec.q1 * &xh2_1;
            }
        }
        let x1_1 = &spec.q1 * &x2_1 + &u;
        x.view_mut((0, last), (p, 1)).copy_from(&x1_1);
        let big = sup(&x).max(xi.amax()).max(sup(&xh)).max(xih.amax());
        if !big.is_finite() || big > BLOW_UP {
            return Err(SimError::BlowUp { t_last: t - dt });
        }
        if s % cfg.decimation == 0 || s == steps {
            record(&mut trace, t, &x, &xh, &xi, &xih, &u);
        }
    }
    Ok(trace)
}

/// The observer error system driven by ε_x(·,0) = x₀ − x̂₀ and
/// ε_ξ(0) = ξ₀ − ξ̂₀, without controller.
pub fn simulate_error_system(
    spec: &PlantSpec,
    sp: &SampledPlant,
    og: &ObserverGains,
    cfg: &SimConfig,
) -> Result<SimTrace, SimError> {
    cfg.check(spec.n, spec.n_xi).map_err(SimError::Config)?;
    let (n, p) = (spec.n, spec.p);
    let grid = sp.grid;
    let last = grid.cells();
    let tr = Transport { n, p, grid, sp };
    let (dt, steps) = time_step(sp, cfg);
    let mut e = sample_ic(&cfg.x0, &grid) - sample_ic(&cfg.x_hat0, &grid);
    let mut exi = DVector::from_column_slice(&cfg.xi0) - DVector::from_column_slice(&cfg.xi_hat0);
    let mut trace = SimTrace::new(TraceKind::ErrorSystem, grid, dt);
    let record = |tr: &mut SimTrace, t: f64, e: &DMatrix<f64>, exi: &DVector<f64>| {
        tr.t.push(t);
        tr.eps_xi_norm.push(exi.norm());
        tr.xi_norm.push(exi.norm());
        tr.x_sup.push(sup(e));
        tr.eps_x_sup.push(row_sups(e));
        tr.x.push(e.clone());
        tr.xi.push(exi.clone());
    };
    record(&mut trace, 0.0, &e, &exi);
    for s in 1..=steps {
        let t = s as f64 * dt;
        let e1 = e.view((0, 0), (p, 1)).column(0).into_owned();
        let c1: Vec<DVector<f64>> = (0..grid.len()).map(|k| sp.c1.at(k) * &exi - og.l.at(k) * &e1).collect();
        let e_new = tr.step(&e, dt, |k| c1[k].clone());
        exi = rk4(&spec.f, &exi, &(-(&og.l_xi * &e1)), dt);
        e = e_new;
        let e2_0 = &spec.c2 * &exi;
        e.view_mut((p, 0), (n - p, 1)).copy_from(&e2_0);
        let e1_1 = &spec.q1 * e.view((p, last), (n - p, 1));
        e.view_mut((0, last), (p, 1)).copy_from(&e1_1);
        let big = sup(&e).max(exi.amax());
        if !big.is_finite() || big > BLOW_UP {
            return Err(SimError::BlowUp { t_last: t - dt });
        }
        if s % cfg.decimation == 0 || s == steps {
            record(&mut trace, t, &e, &exi);
        }
    }
    Ok(trace)
}

/// sup_z |ϑ(z,t)| with ϑ = ε_x + ∫₀ᶻR ε_x − Γε_ξ at every sample of an
/// error-system trace.
pub fn theta_sup(trace: &SimTrace, r: &KernelField, gamma: &SpatialMatrixFunction) -> Vec<f64> {
    let grid = trace.grid;
    let h = grid.h();
    trace
        .x
        .iter()
        .zip(&trace.xi)
        .map(|(e, exi)| {
            let mut worst = 0.0_f64;
            for a in 0..grid.len() {
                let mut v = e.column(a) - gamma.at(a) * exi;
                for b in 0..=a {
                    let w = if a == 0 {
                        0.0
                    } else if b == 0 || b == a {
                        0.5 * h
                    } else {
                        h
                    };
                    if w != 0.0 {
                        v += r.matrix(a, b) * e.column(b) * w;
                    }
                }
                worst = worst.max(v.amax());
            }
            worst
        })
        .collect()
}
