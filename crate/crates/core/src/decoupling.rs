//! Inverse decoupling of the closed loop in backstepping coordinates into a
//! PDE-ODE cascade, and the resulting state feedback gains.

use nalgebra::DMatrix;

use crate::characteristics::CharTable;
use crate::kernel::KernelField;
use crate::model::{Grid, PlantSpec, SampledPlant, SpatialMatrixFunction};
use crate::propagate::Propagator;
use crate::volterra::{scalar_residual, solve_scalar, VolterraError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DecouplingError {
    #[error("Volterra equation for h_{l}{j} failed: {source}", l = .l + 1, j = .j + 1)]
    Hvol {
        l: usize,
        j: usize,
        #[source]
        source: VolterraError,
    },
    #[error("Volterra equation for P(1, .) entry ({l}, {j}) failed: {source}", l = .l + 1, j = .j + 1)]
    P1 {
        l: usize,
        j: usize,
        #[source]
        source: VolterraError,
    },
}

#[derive(Debug, Clone)]
pub struct DecouplingSolution {
    pub p: usize,
    pub n_i: SpatialMatrixFunction,
    pub p_i: KernelField,
    pub h0: SpatialMatrixFunction,
    /// P(1, ζ) at the nodes ζ_b.
    pub p1row: SpatialMatrixFunction,
    pub k: DMatrix<f64>,
}

impl DecouplingSolution {
    pub fn m1(&self) -> SpatialMatrixFunction {
        self.n_i.map(|m| m.rows(0, self.p).into_owned())
    }

    pub fn m2(&self) -> SpatialMatrixFunction {
        let r = self.n_i.shape().0 - self.p;
        self.n_i.map(|m| m.rows(self.p, r).into_owned())
    }

    pub fn h1(&self) -> SpatialMatrixFunction {
        self.h0.map(|m| m.rows(0, self.p).into_owned())
    }
}

#[derive(Debug, Clone)]
pub struct FeedbackGains {
    pub k_xi: DMatrix<f64>,
    /// K_x(z), p×n at every node.
    pub k_x: SpatialMatrixFunction,
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

/// N_I row by row: row r solves λ_r v' = v(F − BK) + [A₀K − G]_r along
/// φ_r, from −e_rᵀK (r < p) or e_rᵀ(C₂ − Q₀K) (r ≥ p).
pub fn solve_ni(
    spec: &PlantSpec,
    sp: &SampledPlant,
    k: &DMatrix<f64>,
    a0: &SpatialMatrixFunction,
    g: &SpatialMatrixFunction,
) -> SpatialMatrixFunction {
    let grid = sp.grid;
    let (n, p, nx) = (spec.n, spec.p, spec.n_xi);
    let table = CharTable::from_plant(sp, p);
    let m = &spec.f - &spec.b * k;
    let init = {
        let mut v = DMatrix::zeros(n, nx);
        v.rows_mut(0, p).copy_from(&(-k));
        v.rows_mut(p, n - p).copy_from(&(&spec.c2 - &spec.q0 * k));
        v
    };
    let forcing: Vec<DMatrix<f64>> = (0..grid.len()).map(|b| a0.at(b) * k - g.at(b)).collect();
    let mut out = vec![DMatrix::zeros(n, nx); grid.len()];
    let mut prop = Propagator::new(&m, grid.h());
    for r in 0..n {
        let f: Vec<DMatrix<f64>> = (0..grid.len())
            .map(|b| forcing[b].rows(r, 1) / sp.lambda[r][b])
            .collect();
        let rows = prop.solve(table.nodes(r), &init.rows(r, 1).into_owned(), &f);
        for (b, v) in rows.into_iter().enumerate() {
            out[b].rows_mut(r, 1).copy_from(&v);
        }
    }
    SpatialMatrixFunction::from_values(grid, out)
}

/// Boundary data f_lj and characteristic propagation of P_{I,1}.
struct PiBuilder<'a> {
    grid: Grid,
    p: usize,
    table: CharTable,
    lambda: &'a [Vec<f64>],
    /// [M₁B]_lj at nodes
    mb: Vec<DMatrix<f64>>,
    a1: Vec<DMatrix<f64>>,
    p_i: KernelField,
    /// h_lj at nodes for l > j
    h: Vec<Vec<Vec<f64>>>,
}

impl<'a> PiBuilder<'a> {
    fn new(sp: &'a SampledPlant, p: usize, m1: &SpatialMatrixFunction, b: &DMatrix<f64>, a0: &SpatialMatrixFunction) -> Self {
        let grid = sp.grid;
        let n = sp.lambda.len();
        PiBuilder {
            grid,
            p,
            table: CharTable::from_plant(sp, p),
            lambda: &sp.lambda,
            mb: (0..grid.len()).map(|k| m1.at(k) * b).collect(),
            a1: (0..grid.len()).map(|k| a0.at(k).rows(0, p).into_owned()).collect(),
            p_i: KernelField::zeros(grid, n, n),
            h: vec![vec![vec![0.0; grid.len()]; p]; p],
        }
    }

    /// ∫₀^{z_a} p_lk(z_a, ζ) h_kj(ζ) dζ by the trapezoid rule.
    fn conv(&self, l: usize, k: usize, j: usize, a: usize) -> f64 {
        let h = self.grid.h();
        let hk = &self.h[k][j];
        let mut s = 0.0;
        for b in 0..=a {
            s += trap_w(h, 0, a, b) * self.p_i.get(l, k, a, b) * hk[b];
        }
        s
    }

    /// Fill p_lj from its boundary trace f(z) = p_lj(z, 0) λ_j(0).
    fn propagate(&mut self, l: usize, j: usize, f: &[f64]) {
        let grid = self.grid;
        for a in 0..grid.len() {
            let phi_z = self.table.node(l, a);
            for b in 0..=a {
                let phi_y = self.table.node(j, b);
                let v = if phi_y > phi_z {
                    0.0
                } else {
                    let s = self.table.phi_inverse_fast(l, phi_z - phi_y);
                    let (c, t) = grid.locate(s);
                    (f[c] + t * (f[c + 1] - f[c])) / self.lambda[j][b]
                };
                self.p_i.set(l, j, a, b, v);
            }
        }
    }

    fn boundary(&self, l: usize, j: usize) -> Vec<f64> {
        (0..self.grid.len())
            .map(|a| {
                let mut s = 0.0;
                for k in j + 1..self.p {
                    s += self.conv(l, k, j, a);
                }
                self.mb[a][(l, j)] + s
            })
            .collect()
    }

    fn hvol_rhs(&self, l: usize, j: usize) -> Vec<f64> {
        (0..self.grid.len())
            .map(|a| {
                let mut s = 0.0;
                for k in l + 1..self.p {
                    s += self.conv(l, k, j, a);
                }
                -s - self.mb[a][(l, j)] + self.a1[a][(l, j)]
            })
            .collect()
    }

    fn solve_h(&mut self, l: usize, j: usize) -> Result<(), DecouplingError> {
        let rhs = self.hvol_rhs(l, j);
        let pi = &self.p_i;
        let sol = solve_scalar(self.grid.h(), |x, y| pi.get(l, l, x, y), &rhs)
            .map_err(|source| DecouplingError::Hvol { l, j, source })?;
        self.h[l][j] = sol;
        Ok(())
    }

    fn line(&mut self, l: usize) -> Result<(), DecouplingError> {
        for j in (l..self.p).rev() {
            let f = self.boundary(l, j);
            self.propagate(l, j, &f);
        }
        for j in 0..l {
            self.solve_h(l, j)?;
        }
        Ok(())
    }

    fn finish(self, m2: &SpatialMatrixFunction, b: &DMatrix<f64>, a0: &SpatialMatrixFunction) -> (KernelField, SpatialMatrixFunction) {
        let p = self.p;
        let n = self.lambda.len();
        let h0 = SpatialMatrixFunction::from_fn(self.grid, |k| {
            let mut m = DMatrix::zeros(n, p);
            for l in 0..p {
                for j in 0..l {
                    m[(l, j)] = self.h[l][j][k];
                }
            }
            let h2 = a0.at(k).rows(p, n - p) - m2.at(k) * b;
            m.rows_mut(p, n - p).copy_from(&h2);
            m
        });
        (self.p_i, h0)
    }
}

/// P_I and H₀ by the line-by-line recursion l = p, …, 1.
pub fn solve_pi(
    spec: &PlantSpec,
    sp: &SampledPlant,
    n_i: &SpatialMatrixFunction,
    a0: &SpatialMatrixFunction,
) -> Result<(KernelField, SpatialMatrixFunction), DecouplingError> {
    let p = spec.p;
    let m1 = n_i.map(|m| m.rows(0, p).into_owned());
    let m2 = n_i.map(|m| m.rows(p, spec.n - p).into_owned());
    let mut pb = PiBuilder::new(sp, p, &m1, &spec.b, a0);
    for l in (0..p).rev() {
        pb.line(l)?;
    }
    Ok(pb.finish(&m2, &spec.b, a0))
}

/// The two-input formulas: p₂₂ and p₁₂ from M₁B alone, h₂₁ from its
/// Volterra equation with kernel p₂₂, then p₁₁ from [M₁B]₁₁ + ∫p₁₂h₂₁.
pub fn solve_pi_p2(
    spec: &PlantSpec,
    sp: &SampledPlant,
    n_i: &SpatialMatrixFunction,
    a0: &SpatialMatrixFunction,
) -> Result<(KernelField, SpatialMatrixFunction), DecouplingError> {
    assert_eq!(spec.p, 2, "two-input path called with p = {}", spec.p);
    let m1 = n_i.map(|m| m.rows(0, 2).into_owned());
    let m2 = n_i.map(|m| m.rows(2, spec.n - 2).into_owned());
    let mut pb = PiBuilder::new(sp, 2, &m1, &spec.b, a0);
    let len = sp.grid.len();
    let f22: Vec<f64> = (0..len).map(|a| pb.mb[a][(1, 1)]).collect();
    pb.propagate(1, 1, &f22);
    let g21: Vec<f64> = (0..len).map(|a| pb.a1[a][(1, 0)] - pb.mb[a][(1, 0)]).collect();
    let pi = &pb.p_i;
    pb.h[1][0] = solve_scalar(sp.grid.h(), |x, y| pi.get(1, 1, x, y), &g21)
        .map_err(|source| DecouplingError::Hvol { l: 1, j: 0, source })?;
    let f12: Vec<f64> = (0..len).map(|a| pb.mb[a][(0, 1)]).collect();
    pb.propagate(0, 1, &f12);
    let f11: Vec<f64> = (0..len).map(|a| pb.mb[a][(0, 0)] + pb.conv(0, 1, 0, a)).collect();
    pb.propagate(0, 0, &f11);
    Ok(pb.finish(&m2, &spec.b, a0))
}

/// Largest residual of the Volterra equations for the h_lj over all l > j.
pub fn hvol_residual(
    spec: &PlantSpec,
    sp: &SampledPlant,
    n_i: &SpatialMatrixFunction,
    a0: &SpatialMatrixFunction,
    p_i: &KernelField,
    h0: &SpatialMatrixFunction,
) -> f64 {
    let p = spec.p;
    let m1 = n_i.map(|m| m.rows(0, p).into_owned());
    let mut pb = PiBuilder::new(sp, p, &m1, &spec.b, a0);
    pb.p_i = p_i.clone();
    for l in 0..p {
        for j in 0..l {
            pb.h[l][j] = (0..sp.grid.len()).map(|k| h0.at(k)[(l, j)]).collect();
        }
    }
    let mut worst = 0.0_f64;
    for l in 0..p {
        for j in 0..l {
            let rhs = pb.hvol_rhs(l, j);
            let r = scalar_residual(sp.grid.h(), |x, y| p_i.get(l, l, x, y), &rhs, &pb.h[l][j]);
            worst = worst.max(r);
        }
    }
    worst
}

/// Σ_{k=l}^{j−1} ∫_{ζ_b}^{z_a} P_lk(z_a, ζ′) p_kj(ζ′, ζ_b) dζ′.
fn p_known(row: &[Vec<Vec<f64>>], p_i: &KernelField, l: usize, j: usize, a: usize, b: usize, h: f64) -> f64 {
    let mut s = 0.0;
    for k in l..j {
        for c in b..=a {
            s += trap_w(h, b, a, c) * row[l][k][c] * p_i.get(k, j, c, b);
        }
    }
    s
}

/// Row z_a of P from P(z,ζ) + ∫_ζᶻ P(z,ζ′)P_I(ζ′,ζ)dζ′ = P_I(z,ζ), entry by
/// entry with s = z − ζ turning it into a forward Volterra equation.
fn p_row(p_i: &KernelField, p: usize, a: usize) -> Result<Vec<Vec<Vec<f64>>>, DecouplingError> {
    let h = p_i.grid().h();
    let mut row = vec![vec![vec![0.0; a + 1]; p]; p];
    for l in 0..p {
        for j in l..p {
            let rhs: Vec<f64> = (0..=a)
                .map(|s| {
                    let b = a - s;
                    p_i.get(l, j, a, b) - p_known(&row, p_i, l, j, a, b, h)
                })
                .collect();
            let u = solve_scalar(h, |x, y| p_i.get(j, j, a - y, a - x), &rhs)
                .map_err(|source| DecouplingError::P1 { l, j, source })?;
            for (s, v) in u.into_iter().enumerate() {
                row[l][j][a - s] = v;
            }
        }
    }
    Ok(row)
}

/// P(1, ζ) at the nodes.
pub fn compute_p1row(p_i: &KernelField, p: usize) -> Result<SpatialMatrixFunction, DecouplingError> {
    let grid = *p_i.grid();
    let (rows, cols) = p_i.shape();
    let row = p_row(p_i, p, grid.cells())?;
    Ok(SpatialMatrixFunction::from_fn(grid, |b| {
        let mut m = DMatrix::zeros(rows, cols);
        for l in 0..p {
            for j in l..p {
                m[(l, j)] = row[l][j][b];
            }
        }
        m
    }))
}

/// The full kernel P(z, ζ) of the direct decoupling transformation, row by
/// row; only verification needs it.
pub fn compute_p_full(p_i: &KernelField, p: usize) -> Result<KernelField, DecouplingError> {
    let grid = *p_i.grid();
    let (rows, cols) = p_i.shape();
    let mut out = KernelField::zeros(grid, rows, cols);
    for a in 0..grid.len() {
        let row = p_row(p_i, p, a)?;
        for l in 0..p {
            for j in l..p {
                for b in 0..=a {
                    out.set(l, j, a, b, row[l][j][b]);
                }
            }
        }
    }
    Ok(out)
}

/// Largest nodal residual of the equation solved by [`compute_p1row`].
pub fn p1row_residual(p_i: &KernelField, p1row: &SpatialMatrixFunction, p: usize) -> f64 {
    let grid = *p_i.grid();
    let n = grid.cells();
    let h = grid.h();
    let mut worst = 0.0_f64;
    for l in 0..p {
        for j in l..p {
            for b in 0..=n {
                let mut s = p1row.at(b)[(l, j)] - p_i.get(l, j, n, b);
                for k in l..=j {
                    for a in b..=n {
                        s += trap_w(h, b, n, a) * p1row.at(a)[(l, k)] * p_i.get(k, j, a, b);
                    }
                }
                worst = worst.max(s.abs());
            }
        }
    }
    worst
}

/// K_ξ = E₁ᵀ(∫₀¹P(1,z)N_I(z)dz − N_I(1)) and
/// K_x(z) = E₁ᵀ(∫_z¹P(1,ζ)K(ζ,z)dζ − K(1,z) − P(1,z)).
pub fn compute_feedback_gains(
    kernel: &KernelField,
    p1row: &SpatialMatrixFunction,
    n_i: &SpatialMatrixFunction,
    p: usize,
) -> FeedbackGains {
    let grid = *kernel.grid();
    let n = grid.cells();
    let h = grid.h();
    let top = |m: &DMatrix<f64>| m.rows(0, p).into_owned();
    let mut k_xi = -top(n_i.at(n));
    for a in 0..=n {
        k_xi += top(p1row.at(a)) * n_i.at(a) * trap_w(h, 0, n, a);
    }
    let k_x = SpatialMatrixFunction::from_fn(grid, |b| {
        let mut m = -top(&kernel.matrix(n, b)) - top(p1row.at(b));
        for a in b..=n {
            let w = trap_w(h, b, n, a);
            if w != 0.0 {
                m += top(p1row.at(a)) * kernel.matrix(a, b) * w;
            }
        }
        m
    });
    FeedbackGains { k_xi, k_x }
}

/// Full decoupling for a given ODE gain K.
pub fn solve_decoupling(
    spec: &PlantSpec,
    sp: &SampledPlant,
    k: &DMatrix<f64>,
    a0: &SpatialMatrixFunction,
    g: &SpatialMatrixFunction,
) -> Result<DecouplingSolution, DecouplingError> {
    let n_i = solve_ni(spec, sp, k, a0, g);
    let (p_i, h0) = solve_pi(spec, sp, &n_i, a0)?;
    let p1row = compute_p1row(&p_i, spec.p)?;
    Ok(DecouplingSolution {
        p: spec.p,
        n_i,
        p_i,
        h0,
        p1row,
        k: k.clone(),
    })
}
