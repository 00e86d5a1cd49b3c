//! Anticollocated observer: kernel R_I through the variable swap
//! x = 1 − ζ, y = 1 − z onto a controller-form problem, the reciprocal
//! kernel R, the decoupling matrix Γ and the gains L_ξ, L(z).
//!
//! With speeds Λ̄(s) = Λ(1 − s), coupling Â(y) = Λ̄(y)Aᵀ(1 − y)Λ̄⁻¹(y) and
//! boundary matrix −Q₁ᵀ, the controller-form kernel V gives
//! R_I(z,ζ) = Λ(z)Vᵀ(1 − ζ, 1 − z)Λ⁻¹(ζ) and S(ζ) = −A₀ⱽ(1 − ζ)ᵀΛ⁻¹(ζ).

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::characteristics::CharTable;
use crate::kernel::{boundary_product, solve_kernel, KernelError, KernelField, KernelProblem, KernelStats};
use crate::linalg::{self, cond, to_complex, CMatrix};
use crate::model::{artificial_bc_kind, DesignParams, Grid, PlantSpec, SampledPlant, SpatialMatrixFunction};
use crate::placement::{place_poles, PlacementError};
use crate::propagate::Propagator;
use crate::volterra::{solve_volterra2, VolterraError, VolterraProblem};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObserverError {
    #[error("observer kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("reciprocal kernel R at row z_{row}: {source}")]
    Reciprocal {
        row: usize,
        #[source]
        source: VolterraError,
    },
    #[error("linear system for the initial values of Gamma is singular (condition {cond:e})")]
    SingularGamma { cond: f64 },
    #[error("(E1' Gamma(0), F) is not observable")]
    Unobservable,
    #[error("observer pole placement: {0}")]
    Placement(#[from] PlacementError),
}

/// Reflected controller-form kernel V and the observer kernel R_I.
#[derive(Debug, Clone)]
pub struct ObserverKernel {
    pub v: KernelField,
    pub r_i: KernelField,
    /// S(ζ), p×n.
    pub s: SpatialMatrixFunction,
    pub stats: KernelStats,
}

#[derive(Debug, Clone)]
pub struct ObserverDesign {
    pub kernel: ObserverKernel,
    pub r: KernelField,
    pub g_o: SpatialMatrixFunction,
    pub gamma: SpatialMatrixFunction,
    pub gamma_cond: f64,
    pub observability: ObservabilityReport,
    pub l_xi: DMatrix<f64>,
    pub l: SpatialMatrixFunction,
}

fn trap_w(h: f64, lo: usize, hi: usize, b: usize) -> f64 {
    if lo == hi {
        0.0
    } else if b == lo || b == hi {
        0.5 * h
    } else {
        h
    }
}

/// λ̄ at the nodes: λ̄_i(s_k) = λ_i(z_{N−k}).
pub fn reflected_speeds(lambda: &[Vec<f64>]) -> Vec<Vec<f64>> {
    lambda.iter().map(|l| l.iter().rev().copied().collect()).collect()
}

pub fn solve_observer_kernel(spec: &PlantSpec, params: &DesignParams) -> Result<ObserverKernel, ObserverError> {
    let grid = Grid::unchecked(params.grid);
    let n = spec.n;
    let p = spec.p;
    let lambda: Vec<Vec<f64>> = spec.lambda.iter().map(|f| f.sample(&grid)).collect();
    let lambda_bar = reflected_speeds(&lambda);
    let lam = |i: usize, z: f64| spec.lambda[i].eval_unchecked(z);
    let lambda_fn = |i: usize, s: f64| lam(i, 1.0 - s);
    let a_fn = |i: usize, j: usize, y: f64| {
        let z = 1.0 - y;
        lam(i, z) * spec.a[j][i].eval_unchecked(z) / lam(j, z)
    };
    let q0 = -spec.q1.transpose();
    let bcs = params
        .observer_bcs
        .iter()
        .filter(|bc| artificial_bc_kind(n, p, bc.i, bc.j).is_some())
        .cloned()
        .collect();
    let prob = KernelProblem {
        grid,
        n,
        p,
        lambda: lambda_bar.clone(),
        lambda_fn: &lambda_fn,
        a_fn: &a_fn,
        q0: q0.clone(),
        bcs,
        tol: params.kernel_tol,
        max_iter: params.kernel_max_iter,
    };
    let (v, stats) = solve_kernel(&prob)?;
    let r_i = unswap(&v, &lambda);
    let lambda0: Vec<f64> = lambda_bar.iter().map(|l| l[0]).collect();
    let last = grid.cells();
    let s = SpatialMatrixFunction::from_fn(grid, |b| {
        let mut a0 = boundary_product(&v, &lambda0, &q0, p, last - b);
        for i in 0..p {
            for j in i..p {
                a0[(i, j)] = 0.0;
            }
        }
        DMatrix::from_fn(p, n, |i, j| -a0[(j, i)] / lambda[j][b])
    });
    Ok(ObserverKernel { v, r_i, s, stats })
}

/// R_I(z_a, ζ_b) = λ_i(z_a) V_ji(x_{N−b}, y_{N−a}) / λ_j(ζ_b).
pub fn unswap(v: &KernelField, lambda: &[Vec<f64>]) -> KernelField {
    let grid = *v.grid();
    let n = lambda.len();
    let last = grid.cells();
    let mut r = KernelField::zeros(grid, n, n);
    for a in 0..grid.len() {
        for b in 0..=a {
            for i in 0..n {
                for j in 0..n {
                    let val = lambda[i][a] * v.get(j, i, last - b, last - a) / lambda[j][b];
                    r.set(i, j, a, b, val);
                }
            }
        }
    }
    r
}

/// max |(E₁ᵀ − Q₁E₂ᵀ)R_I(1,ζ) + S(ζ)| over nodes.
pub fn observer_boundary_residual(r_i: &KernelField, s: &SpatialMatrixFunction, q1: &DMatrix<f64>, p: usize) -> f64 {
    let grid = *r_i.grid();
    let last = grid.cells();
    let (n, _) = r_i.shape();
    let mut worst = 0.0_f64;
    for b in 0..grid.len() {
        let r = r_i.matrix(last, b);
        let lhs = r.rows(0, p) - q1 * r.rows(p, n - p) + s.at(b);
        worst = worst.max(linalg::max_abs(&lhs));
    }
    worst
}

/// max |Λ R_I(z,z) − R_I(z,z)Λ − A(z)| over nodes, skipping the corner
/// z = 1 of entries fed from the reflected bottom edge.
pub fn observer_diagonal_residual(r_i: &KernelField, p: usize, sp: &SampledPlant) -> f64 {
    let grid = *r_i.grid();
    let (n, _) = r_i.shape();
    let last = grid.cells();
    let mut worst = 0.0_f64;
    for a in 0..grid.len() {
        let am = sp.a.at(a);
        for i in 0..n {
            for j in 0..n {
                if i == j || (a == last && crate::kernel::traced_down(p, j, i)) {
                    continue;
                }
                let lhs = r_i.get(i, j, a, a) * (sp.lambda[i][a] - sp.lambda[j][a]);
                worst = worst.max((lhs - am[(i, j)]).abs());
            }
        }
    }
    worst
}

/// R from R(z,ζ) − ∫_ζᶻ R(z,ζ′)R_I(ζ′,ζ)dζ′ = R_I(z,ζ), one Volterra
/// equation in s = z − ζ per row z_a (solved for Rᵀ).
pub fn compute_r(r_i: &KernelField) -> Result<KernelField, ObserverError> {
    let grid = *r_i.grid();
    let (n, _) = r_i.shape();
    let mut r = KernelField::zeros(grid, n, n);
    for a in 0..grid.len() {
        let prob = VolterraProblem {
            h: grid.h(),
            len: a + 1,
            dim: n,
            cols: n,
            kernel: |x: usize, y: usize, out: &mut [f64]| {
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = -r_i.get(j, i, a - y, a - x);
                    }
                }
            },
            rhs: |x: usize, out: &mut [f64]| {
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = r_i.get(j, i, a, a - x);
                    }
                }
            },
        };
        let sol = solve_volterra2(&prob).map_err(|source| ObserverError::Reciprocal { row: a, source })?;
        for x in 0..=a {
            let rt = sol.node(x);
            for i in 0..n {
                for j in 0..n {
                    r.set(i, j, a, a - x, rt[j * n + i]);
                }
            }
        }
    }
    Ok(r)
}

/// max over nodes of |R(z,ζ) − ∫_ζᶻ R(z,ζ′)R_I(ζ′,ζ)dζ′ − R_I(z,ζ)|;
/// restricted to ζ = 0 when `bottom_only`.
pub fn reciprocity_residual(r: &KernelField, r_i: &KernelField, bottom_only: bool) -> f64 {
    let grid = *r.grid();
    let h = grid.h();
    let mut worst = 0.0_f64;
    for a in 0..grid.len() {
        let top = if bottom_only { 0 } else { a };
        for b in 0..=top {
            let mut m = r.matrix(a, b) - r_i.matrix(a, b);
            for c in b..=a {
                let w = trap_w(h, b, a, c);
                if w != 0.0 {
                    m -= r.matrix(a, c) * r_i.matrix(c, b) * w;
                }
            }
            worst = worst.max(linalg::max_abs(&m));
        }
    }
    worst
}

/// G_o(z) = C₁(z) + ∫₀ᶻR(z,ζ)C₁(ζ)dζ − R(z,0)Λ(0)E₂C₂.
pub fn compute_go(r: &KernelField, spec: &PlantSpec, sp: &SampledPlant) -> SpatialMatrixFunction {
    let grid = *r.grid();
    let h = grid.h();
    let (n, p) = (spec.n, spec.p);
    let lam2: DMatrix<f64> = DMatrix::from_fn(n - p, n - p, |i, j| if i == j { sp.lambda[p + i][0] } else { 0.0 });
    let e2c2 = lam2 * &spec.c2;
    SpatialMatrixFunction::from_fn(grid, |a| {
        let mut g = sp.c1.at(a).clone();
        if !sp.c1_zero {
            for b in 0..=a {
                let w = trap_w(h, 0, a, b);
                if w != 0.0 {
                    g += r.matrix(a, b) * sp.c1.at(b) * w;
                }
            }
        }
        g -= r.matrix(a, 0).columns(p, n - p) * &e2c2;
        g
    })
}

/// Γ from Λ Γ′ = ΓF − G_o, E₂ᵀΓ(0) = C₂ and
/// (E₁ᵀ − Q₁E₂ᵀ)Γ(1) = −∫₀¹S(ζ)Γ(ζ)dζ. Returns Γ and the condition
/// number of the block-triangular system for E₁ᵀΓ(0).
pub fn solve_gamma(
    spec: &PlantSpec,
    sp: &SampledPlant,
    g_o: &SpatialMatrixFunction,
    s: &SpatialMatrixFunction,
) -> Result<(SpatialMatrixFunction, f64), ObserverError> {
    let grid = sp.grid;
    let (n, p, nx) = (spec.n, spec.p, spec.n_xi);
    let len = grid.len();
    let h = grid.h();
    let last = grid.cells();
    let table = CharTable::from_plant(sp, p);
    let mut prop = Propagator::new(&spec.f, h);
    let forcing = |r: usize| -> Vec<DMatrix<f64>> {
        (0..len).map(|b| -g_o.at(b).rows(r, 1) / sp.lambda[r][b]).collect()
    };
    let mut gamma = vec![DMatrix::zeros(n, nx); len];
    for i in 0..n - p {
        let r = p + i;
        let rows = prop.solve(table.nodes(r), &spec.c2.rows(i, 1).into_owned(), &forcing(r));
        for (b, v) in rows.into_iter().enumerate() {
            gamma[b].rows_mut(r, 1).copy_from(&v);
        }
    }
    // E₁ᵀΓ = N₀ + H with N₀ rows ν_i(0)Ψ_i(z,0)
    let zero = DMatrix::zeros(1, nx);
    let mut hpart: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(p);
    let mut psi: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(p);
    for i in 0..p {
        hpart.push(prop.solve(table.nodes(i), &zero, &forcing(i)));
        psi.push(prop.transition(table.nodes(i)));
    }
    let q = &spec.q1 * gamma[last].rows(p, n - p);
    let mut big = DMatrix::zeros(p * nx, p * nx);
    let mut rhs = DMatrix::zeros(1, p * nx);
    for i in 0..p {
        let mut r = q.rows(i, 1) - &hpart[i][last];
        for b in 0..len {
            let w = trap_w(h, 0, last, b);
            let sb = s.at(b);
            for j in 0..p {
                r -= &hpart[j][b] * (sb[(i, j)] * w);
            }
            r -= sb.view((i, p), (1, n - p)) * gamma[b].rows(p, n - p) * w;
        }
        rhs.view_mut((0, i * nx), (1, nx)).copy_from(&r);
        big.view_mut((i * nx, i * nx), (nx, nx)).copy_from(&psi[i][last]);
        for j in 0..p {
            let mut mij = DMatrix::zeros(nx, nx);
            for b in 0..len {
                let sij = s.at(b)[(i, j)];
                if sij != 0.0 {
                    mij += &psi[j][b] * (sij * trap_w(h, 0, last, b));
                }
            }
            let mut blk = big.view_mut((j * nx, i * nx), (nx, nx));
            blk += mij;
        }
    }
    let c = cond(&big);
    if !c.is_finite() || c > 1e12 {
        return Err(ObserverError::SingularGamma { cond: c });
    }
    let nu0 = big
        .transpose()
        .lu()
        .solve(&rhs.transpose())
        .ok_or(ObserverError::SingularGamma { cond: c })?
        .transpose();
    for i in 0..p {
        let v0 = nu0.view((0, i * nx), (1, nx)).into_owned();
        for b in 0..len {
            let row = &v0 * &psi[i][b] + &hpart[i][b];
            gamma[b].rows_mut(i, 1).copy_from(&row);
        }
    }
    Ok((SpatialMatrixFunction::from_values(grid, gamma), c))
}

/// (E₂ᵀΓ(0) − C₂, (E₁ᵀ − Q₁E₂ᵀ)Γ(1) + ∫SΓ) in max norm.
pub fn gamma_boundary_residuals(
    spec: &PlantSpec,
    gamma: &SpatialMatrixFunction,
    s: &SpatialMatrixFunction,
) -> (f64, f64) {
    let grid = *gamma.grid();
    let (n, p) = (spec.n, spec.p);
    let h = grid.h();
    let last = grid.cells();
    let r0 = linalg::max_abs(&(gamma.at(0).rows(p, n - p) - &spec.c2));
    let g1 = gamma.at(last);
    let mut r1 = g1.rows(0, p) - &spec.q1 * g1.rows(p, n - p);
    for b in 0..grid.len() {
        r1 += s.at(b) * gamma.at(b) * trap_w(h, 0, last, b);
    }
    (r0, linalg::max_abs(&r1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservabilityMethod {
    Eigenvectors,
    Pbh,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModeCheck {
    pub eigenvalue: [f64; 2],
    /// Smallest singular value of C V over an orthonormal eigenbasis V
    /// (PBH: of [μI − F; C]).
    pub value: f64,
    pub threshold: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ObservabilityReport {
    pub method: ObservabilityMethod,
    pub modes: Vec<ModeCheck>,
    pub observable: bool,
}

fn smin(m: &CMatrix) -> f64 {
    let s = linalg::complex_singular_values(m);
    s.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Eigenvector test E₁ᵀΓ(0)v ≠ 0 for every eigenvector of F, with a PBH
/// rank test when F is defective.
pub fn check_observability(c: &DMatrix<f64>, f: &DMatrix<f64>) -> ObservabilityReport {
    let nx = f.nrows();
    let cn = linalg::singular_values(c).into_iter().fold(0.0, f64::max);
    let threshold = 1e-8 * cn;
    let clusters = linalg::eigenvalue_clusters(f);
    let fc = to_complex(f);
    let cc = to_complex(c);
    let shifted = |mu: Complex64| {
        let mut m = -fc.clone();
        for k in 0..nx {
            m[(k, k)] += mu;
        }
        m
    };
    let bases: Vec<_> = clusters
        .iter()
        .map(|&(mu, _)| linalg::null_space(&shifted(mu), 1e-8))
        .collect();
    let defective = clusters.iter().zip(&bases).any(|(&(_, mult), v)| v.len() < mult);
    let mut modes = Vec::new();
    let method = if defective {
        for &(mu, _) in &clusters {
            let mut stack = CMatrix::zeros(nx + c.nrows(), nx);
            stack.view_mut((0, 0), (nx, nx)).copy_from(&shifted(mu));
            stack.view_mut((nx, 0), (c.nrows(), nx)).copy_from(&cc);
            let value = smin(&stack);
            let tol = 1e-8 * (1.0 + linalg::max_abs(f) + cn);
            modes.push(ModeCheck {
                eigenvalue: [mu.re, mu.im],
                value,
                threshold: tol,
                ok: value > tol,
            });
        }
        ObservabilityMethod::Pbh
    } else {
        for (&(mu, _), basis) in clusters.iter().zip(&bases) {
            let v = CMatrix::from_columns(basis);
            let value = smin(&(&cc * v));
            modes.push(ModeCheck {
                eigenvalue: [mu.re, mu.im],
                value,
                threshold,
                ok: value > threshold,
            });
        }
        ObservabilityMethod::Eigenvectors
    };
    let observable = modes.iter().all(|m| m.ok);
    ObservabilityReport {
        method,
        modes,
        observable,
    }
}

/// L_ξ by dual placement for F − L_ξE₁ᵀΓ(0) and
/// L(z) = Γ(z)L_ξ − ∫₀ᶻR_I(z,ζ)Γ(ζ)dζ L_ξ − R_I(z,0)Λ(0)E₁.
pub fn compute_observer_gains(
    gamma: &SpatialMatrixFunction,
    r_i: &KernelField,
    sp: &SampledPlant,
    f: &DMatrix<f64>,
    p: usize,
    poles: &[Complex64],
    seed: u64,
) -> Result<(DMatrix<f64>, SpatialMatrixFunction), ObserverError> {
    let c = gamma.at(0).rows(0, p).into_owned();
    let l_xi = place_poles(&f.transpose(), &c.transpose(), poles, seed)?.transpose();
    let l = observer_gain_field(gamma, r_i, sp, &l_xi, p);
    Ok((l_xi, l))
}

pub fn observer_gain_field(
    gamma: &SpatialMatrixFunction,
    r_i: &KernelField,
    sp: &SampledPlant,
    l_xi: &DMatrix<f64>,
    p: usize,
) -> SpatialMatrixFunction {
    let grid = *gamma.grid();
    let h = grid.h();
    let lam1 = DMatrix::from_fn(p, p, |i, j| if i == j { sp.lambda[i][0] } else { 0.0 });
    SpatialMatrixFunction::from_fn(grid, |a| {
        let mut t = gamma.at(a).clone();
        for b in 0..=a {
            let w = trap_w(h, 0, a, b);
            if w != 0.0 {
                t -= r_i.matrix(a, b) * gamma.at(b) * w;
            }
        }
        t * l_xi - r_i.matrix(a, 0).columns(0, p) * &lam1
    })
}

/// Full observer design.
pub fn design_observer(spec: &PlantSpec, sp: &SampledPlant, params: &DesignParams) -> Result<ObserverDesign, ObserverError> {
    let kernel = solve_observer_kernel(spec, params)?;
    let r = compute_r(&kernel.r_i)?;
    let g_o = compute_go(&r, spec, sp);
    let (gamma, gamma_cond) = solve_gamma(spec, sp, &g_o, &kernel.s)?;
    let c = gamma.at(0).rows(0, spec.p).into_owned();
    let observability = check_observability(&c, &spec.f);
    if !observability.observable {
        return Err(ObserverError::Unobservable);
    }
    let (l_xi, l) = compute_observer_gains(&gamma, &kernel.r_i, sp, &spec.f, spec.p, &params.observer_poles, params.seed)?;
    Ok(ObserverDesign {
        kernel,
        r,
        g_o,
        gamma,
        gamma_cond,
        observability,
        l_xi,
        l,
    })
}

/// Interior PDE residual (sup, mean) of the reflected kernel V, which is
/// the observer kernel equation up to the change of variables.
pub fn observer_interior_residual(kernel: &ObserverKernel, spec: &PlantSpec, band: f64) -> (f64, f64) {
    let grid = *kernel.v.grid();
    let lambda: Vec<Vec<f64>> = spec.lambda.iter().map(|f| f.sample(&grid)).collect();
    let lambda_bar = reflected_speeds(&lambda);
    let last = grid.cells();
    let a_hat = SpatialMatrixFunction::from_fn(grid, |k| {
        let z = grid.z(last - k);
        DMatrix::from_fn(spec.n, spec.n, |i, j| {
            lambda_bar[i][k] * spec.a[j][i].eval_unchecked(z) / lambda_bar[j][k]
        })
    });
    crate::kernel::interior_residual(&kernel.v, spec.p, &lambda_bar, &a_hat, band)
}
