//! Backstepping kernels on the triangle 0 ≤ ζ ≤ z ≤ 1.
//!
//! Each entry of the kernel PDE
//!
//! ```text
//! Λ(z) ∂_z K + ∂_ζ(K Λ(ζ)) = K A(ζ)
//! ```
//!
//! is transported along its characteristics φ_i(z) − φ_j(ζ) = c. With
//! Y = K_ij λ_j(ζ) one has dY/dζ = Σ_{k≠j} K_ik A_kj(ζ) along a
//! characteristic, so every entry is an integral equation fed by the
//! boundary datum at one end of its characteristic. The coupled system is
//! solved by fixed-point sweeps over the entries of each row.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::characteristics::CharTable;
use crate::model::{
    artificial_bc_kind, ArtificialBc, DesignParams, Grid, PlantSpec, SampledPlant, ScalarFunction,
    SpatialMatrixFunction,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("kernel iteration did not converge after {iters} sweeps (row {row}, last change {change:e})")]
    NoConvergence { row: usize, iters: usize, change: f64 },
    #[error("characteristic of entry ({i}, {j}) left the triangle without reaching data")]
    Tracing { i: usize, j: usize },
    #[error("kernel values are not finite in row {row}")]
    NonFinite { row: usize },
}

#[inline]
pub fn tri(a: usize, b: usize) -> usize {
    a * (a + 1) / 2 + b
}

/// Matrix-valued function sampled at the triangular nodes (z_a, ζ_b), b ≤ a.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelField {
    grid: Grid,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl KernelField {
    pub fn zeros(grid: Grid, rows: usize, cols: usize) -> Self {
        let t = tri_count(&grid);
        KernelField {
            grid,
            rows,
            cols,
            data: vec![0.0; rows * cols * t],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn base(&self, i: usize, j: usize) -> usize {
        (i * self.cols + j) * tri_count(&self.grid)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, a: usize, b: usize) -> f64 {
        debug_assert!(b <= a);
        self.data[self.base(i, j) + tri(a, b)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, a: usize, b: usize, v: f64) {
        let o = self.base(i, j) + tri(a, b);
        self.data[o] = v;
    }

    pub fn entry(&self, i: usize, j: usize) -> &[f64] {
        let o = self.base(i, j);
        &self.data[o..o + tri_count(&self.grid)]
    }

    pub fn entry_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = self.base(i, j);
        let t = tri_count(&self.grid);
        &mut self.data[o..o + t]
    }

    pub fn matrix(&self, a: usize, b: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j, a, b))
    }

    pub fn set_matrix(&mut self, a: usize, b: usize, m: &DMatrix<f64>) {
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.set(i, j, a, b, m[(i, j)]);
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise difference; grids must match.
    pub fn max_diff(&self, other: &KernelField) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Interpolated entry at (z, ζ) with ζ ≤ z: bilinear in square cells,
    /// linear on the half cells along the diagonal.
    pub fn eval(&self, i: usize, j: usize, z: f64, zeta: f64) -> f64 {
        let n = self.grid.cells();
        let zeta = zeta.min(z);
        let sz = (z.clamp(0.0, 1.0) * n as f64).min(n as f64);
        let sy = (zeta.clamp(0.0, 1.0) * n as f64).min(sz);
        let mut a = (sz.floor() as usize).min(n - 1);
        let mut b = (sy.floor() as usize).min(n - 1);
        if b > a {
            b = a;
        }
        let tz = sz - a as f64;
        let ty = sy - b as f64;
        let e = self.entry(i, j);
        if b < a {
            let v00 = e[tri(a, b)];
            let v10 = e[tri(a + 1, b)];
            let v01 = e[tri(a, b + 1)];
            let v11 = e[tri(a + 1, b + 1)];
            (1.0 - tz) * ((1.0 - ty) * v00 + ty * v01) + tz * ((1.0 - ty) * v10 + ty * v11)
        } else {
            // half cell with corners (a,a), (a+1,a), (a+1,a+1); ty ≤ tz
            if a == n {
                a = n - 1;
            }
            let ty = ty.min(tz);
            let v_aa = e[tri(a, a)];
            let v_1a = e[tri(a + 1, a)];
            let v_11 = e[tri(a + 1, a + 1)];
            v_aa + tz * (v_1a - v_aa) + ty * (v_11 - v_1a)
        }
    }

    /// Kernel export: one line per (z, ζ, i, j) with 1-based indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("z,zeta,i,j,value\n");
        for a in 0..self.grid.len() {
            for b in 0..=a {
                for i in 0..self.rows {
                    for j in 0..self.cols {
                        let _ = writeln!(
                            out,
                            "{},{},{},{},{:e}",
                            self.grid.z(a),
                            self.grid.z(b),
                            i + 1,
                            j + 1,
                            self.get(i, j, a, b)
                        );
                    }
                }
            }
        }
        out
    }
}

/// Whether entry (i, j) takes its data at the lower end of its
/// characteristics (bottom edge or diagonal below the node).
pub fn traced_down(p: usize, i: usize, j: usize) -> bool {
    (i < p && j < p && i <= j) || (i >= p && j >= p && i >= j)
}

/// Invariant c of the line along which entry (i, j) jumps: diagonal and
/// boundary data disagree at a corner of the triangle.
pub fn jump_invariant(table: &CharTable, p: usize, i: usize, j: usize) -> Option<f64> {
    if i == j {
        None
    } else if traced_down(p, i, j) {
        Some(0.0)
    } else if (i < p) == (j < p) {
        Some(table.phi_fast(i, 1.0) - table.phi_fast(j, 1.0))
    } else {
        None
    }
}

pub fn tri_count(grid: &Grid) -> usize {
    let l = grid.len();
    l * (l + 1) / 2
}

/// Coefficients of a kernel problem in controller form.
pub struct KernelProblem<'a> {
    pub grid: Grid,
    pub n: usize,
    pub p: usize,
    /// λ_i at grid nodes.
    pub lambda: Vec<Vec<f64>>,
    pub lambda_fn: &'a dyn Fn(usize, f64) -> f64,
    pub a_fn: &'a dyn Fn(usize, usize, f64) -> f64,
    /// Boundary matrix Q₀ in K(z,0)Λ(0)(E₁ + E₂Q₀).
    pub q0: DMatrix<f64>,
    pub bcs: Vec<ArtificialBc>,
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelStats {
    pub sweeps: Vec<usize>,
    pub final_change: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EndKind {
    Diag(f64),
    Bottom(f64),
    Right(f64),
}

#[derive(Debug, Clone, Copy)]
struct End {
    kind: EndKind,
    zeta: f64,
    /// Fixed datum Y = K λ_j at the end (unused for the coupled bottom BC).
    y: f64,
    coupled: bool,
}

#[derive(Debug, Clone)]
struct Characteristic {
    c: f64,
    end: End,
    /// A_kj at the end point, one per k.
    a_end: Vec<f64>,
    first_row: isize,
    step: isize,
    offset: usize,
    count: usize,
}

#[derive(Debug, Clone, Copy)]
struct Crossing {
    a0: u32,
    tau: f64,
}

#[derive(Debug, Clone, Copy)]
enum NodeRule {
    /// Node lies on its own data boundary.
    OnBoundary,
    /// Interpolate F between characteristics r and r + 1 at weight t.
    Blend { r: usize, t: f64 },
    /// Integrate along the node's own characteristic.
    Direct,
}

#[derive(Debug, Clone)]
struct NodeInfo {
    end: End,
    a_end: Vec<f64>,
    rule: NodeRule,
    c: f64,
}

struct EntryPlan {
    j: usize,
    down: bool,
    chars: Vec<Characteristic>,
    crossings: Vec<Crossing>,
    nodes: Vec<NodeInfo>,
}

struct Geometry<'a> {
    prob: &'a KernelProblem<'a>,
    table: CharTable,
    bc_map: HashMap<(usize, usize), ScalarFunction>,
}

impl<'a> Geometry<'a> {
    fn phi(&self, i: usize, z: f64) -> f64 {
        self.table.phi_fast(i, z)
    }

    fn in_range(&self, i: usize, s: f64) -> bool {
        let (lo, hi) = self.table.range(i);
        let slack = 1e-12 * (1.0 + lo.abs() + hi.abs());
        s >= lo - slack && s <= hi + slack
    }

    fn inv(&self, i: usize, s: f64) -> f64 {
        let (lo, hi) = self.table.range(i);
        self.table.phi_inverse_fast(i, s.clamp(lo, hi))
    }

    /// Root w of φ_i(w) − φ_j(w) = c (piecewise linear, monotone), if any.
    fn diag_root(&self, i: usize, j: usize, c: f64) -> Option<f64> {
        let pi = self.table.nodes(i);
        let pj = self.table.nodes(j);
        let n = pi.len() - 1;
        let g = |k: usize| pi[k] - pj[k];
        let (g0, g1) = (g(0), g(n));
        let inc = g1 > g0;
        let slack = 1e-12 * (1.0 + g1.abs());
        let (lo, hi) = if inc { (g0, g1) } else { (g1, g0) };
        if c < lo - slack || c > hi + slack {
            return None;
        }
        let key = |k: usize| if inc { g(k) } else { -g(k) };
        let target = if inc { c } else { -c };
        if target <= key(0) {
            return Some(0.0);
        }
        if target >= key(n) {
            return Some(1.0);
        }
        let (mut a, mut b) = (0usize, n);
        while b - a > 1 {
            let m = (a + b) / 2;
            if key(m) <= target {
                a = m;
            } else {
                b = m;
            }
        }
        let t = (target - key(a)) / (key(b) - key(a));
        Some((a as f64 + t) * self.prob.grid.h())
    }

    fn datum_diag(&self, i: usize, j: usize, w: f64) -> f64 {
        let lf = self.prob.lambda_fn;
        let (li, lj) = (lf(i, w), lf(j, w));
        (self.prob.a_fn)(i, j, w) * lj / (lj - li)
    }

    fn bc(&self, i: usize, j: usize, x: f64) -> f64 {
        self.bc_map
            .get(&(i, j))
            .map(|f| f.eval_unchecked(x))
            .unwrap_or(0.0)
    }

    /// Data end of the characteristic with invariant c, if it meets the
    /// triangle.
    fn end_for(&self, i: usize, j: usize, down: bool, c: f64) -> Option<End> {
        let p = self.prob.p;
        let lf = self.prob.lambda_fn;
        let root = if i != j { self.diag_root(i, j, c) } else { None };
        if down {
            if let Some(w) = root.filter(|&w| w > 0.0) {
                return Some(End {
                    kind: EndKind::Diag(w),
                    zeta: w,
                    y: self.datum_diag(i, j, w),
                    coupled: false,
                });
            }
            if self.in_range(i, c) {
                let z = self.inv(i, c);
                let coupled = i < p && j < p;
                let y = if coupled { 0.0 } else { self.bc(i, j, z) * lf(j, 0.0) };
                return Some(End {
                    kind: EndKind::Bottom(z),
                    zeta: 0.0,
                    y,
                    coupled,
                });
            }
            root.map(|w| End {
                kind: EndKind::Diag(w),
                zeta: w,
                y: self.datum_diag(i, j, w),
                coupled: false,
            })
        } else {
            if let Some(w) = root {
                return Some(End {
                    kind: EndKind::Diag(w),
                    zeta: w,
                    y: self.datum_diag(i, j, w),
                    coupled: false,
                });
            }
            let s = self.phi(i, 1.0) - c;
            if (i < p) == (j < p) && self.in_range(j, s) {
                let zeta = self.inv(j, s);
                return Some(End {
                    kind: EndKind::Right(zeta),
                    zeta,
                    y: self.bc(i, j, zeta) * lf(j, zeta),
                    coupled: false,
                });
            }
            None
        }
    }

    /// Crossing of characteristic c with row b, if inside the triangle.
    fn crossing(&self, i: usize, j: usize, c: f64, b: usize) -> Option<Crossing> {
        let grid = &self.prob.grid;
        let zb = grid.z(b);
        let s = c + self.table.node(j, b);
        if !self.in_range(i, s) {
            return None;
        }
        let z = self.inv(i, s);
        if z < zb - 1e-9 * grid.h() {
            return None;
        }
        let n = grid.cells();
        let sz = (z.max(zb) * n as f64).min(n as f64);
        let mut a0 = sz.floor() as usize;
        if a0 >= n {
            a0 = n - 1;
        }
        let a0 = a0.max(b.min(n - 1));
        let tau = (sz - a0 as f64).clamp(0.0, 1.0);
        Some(Crossing { a0: a0 as u32, tau })
    }

    fn a_at(&self, j: usize, x: f64) -> Vec<f64> {
        (0..self.prob.n).map(|k| (self.prob.a_fn)(k, j, x)).collect()
    }

    fn first_row(&self, down: bool, zeta_e: f64) -> isize {
        let n = self.prob.grid.cells() as f64;
        let s = zeta_e * n;
        let near = s.round();
        if (s - near).abs() < 1e-9 {
            // end sits on a row; the row itself is the first sample
            near as isize
        } else if down {
            s.ceil() as isize
        } else {
            s.floor() as isize
        }
    }

    fn plan(&self, i: usize, j: usize) -> Result<EntryPlan, KernelError> {
        let p = self.prob.p;
        let grid = &self.prob.grid;
        let n = grid.cells();
        let down = traced_down(p, i, j);
        let corners = [0.0, self.phi(i, 1.0), self.phi(i, 1.0) - self.phi(j, 1.0)];
        let cmin = corners.iter().cloned().fold(f64::INFINITY, f64::min);
        let cmax = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let vmax = self.prob.lambda[i].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let dc0 = grid.h() / vmax;
        let count = (((cmax - cmin) / dc0).ceil() as usize).max(1);
        let dc = (cmax - cmin) / count as f64;
        let mut chars = Vec::with_capacity(count + 1);
        let mut crossings = Vec::new();
        for r in 0..=count {
            let c = if r == count { cmax } else { cmin + r as f64 * dc };
            let end = match self.end_for(i, j, down, c) {
                Some(e) => e,
                None => {
                    chars.push(Characteristic {
                        c,
                        end: End {
                            kind: EndKind::Bottom(0.0),
                            zeta: 0.0,
                            y: 0.0,
                            coupled: false,
                        },
                        a_end: Vec::new(),
                        first_row: 0,
                        step: 1,
                        offset: crossings.len(),
                        count: 0,
                    });
                    continue;
                }
            };
            let step: isize = if down { 1 } else { -1 };
            let first = self.first_row(down, end.zeta);
            let offset = crossings.len();
            let mut b = first;
            while b >= 0 && b <= n as isize {
                match self.crossing(i, j, c, b as usize) {
                    Some(x) => crossings.push(x),
                    None => break,
                }
                b += step;
            }
            let cnt = crossings.len() - offset;
            chars.push(Characteristic {
                c,
                end,
                a_end: self.a_at(j, end.zeta),
                first_row: first,
                step,
                offset,
                count: cnt,
            });
        }
        let mut nodes = Vec::with_capacity(tri_count(grid));
        for a in 0..=n {
            for b in 0..=a {
                let c = self.phi(i, grid.z(a)) - self.table.node(j, b);
                let end = self
                    .end_for(i, j, down, c)
                    .ok_or(KernelError::Tracing { i, j })?;
                let on_boundary = match end.kind {
                    EndKind::Diag(_) => a == b,
                    EndKind::Bottom(_) => b == 0,
                    EndKind::Right(_) => a == n,
                };
                let rule = if on_boundary {
                    NodeRule::OnBoundary
                } else {
                    let s = ((c - cmin) / dc).clamp(0.0, count as f64);
                    let r = (s.floor() as usize).min(count.saturating_sub(1));
                    let t = s - r as f64;
                    let has = |ch: &Characteristic| {
                        let idx = (b as isize - ch.first_row) * ch.step;
                        idx >= 0 && (idx as usize) < ch.count
                    };
                    if has(&chars[r]) && has(&chars[r + 1]) {
                        NodeRule::Blend { r, t }
                    } else {
                        NodeRule::Direct
                    }
                };
                let a_end = self.a_at(j, end.zeta);
                nodes.push(NodeInfo { end, a_end, rule, c });
            }
        }
        Ok(EntryPlan {
            j,
            down,
            chars,
            crossings,
            nodes,
        })
    }
}

struct RowSolver<'a> {
    geo: &'a Geometry<'a>,
    i: usize,
    /// A_kj(ζ_b) for all k, j, b: index (k * n + j) * len + b.
    a_rows: &'a [f64],
    /// Jump invariant of entry (i, k), per k.
    jumps: Vec<Option<f64>>,
    side_tol: f64,
}

#[derive(Debug, Clone, Copy)]
enum Loc {
    Row { b: usize, x: Crossing },
    End(EndKind),
}

/// A point on a characteristic; `phi_i` is φ_i(z) there.
#[derive(Debug, Clone, Copy)]
struct Sample {
    zeta: f64,
    phi_i: f64,
    loc: Loc,
}

/// Value at t0 + tau on a line of nodes lo..=hi, using only nodes on side
/// `target` of a jump curve: linear through the two nearest such nodes.
fn one_sided(
    val: impl Fn(usize) -> f64,
    side: impl Fn(usize) -> i8,
    lo: usize,
    hi: usize,
    t0: usize,
    tau: f64,
    target: i8,
) -> f64 {
    let linear = || {
        let v0 = val(t0);
        if tau > 0.0 {
            v0 + tau * (val(t0 + 1) - v0)
        } else {
            v0
        }
    };
    if target == 0 || (side(t0) == target && side(t0 + 1) == target) {
        return linear();
    }
    let x = t0 as f64 + tau;
    let first = t0.saturating_sub(2).max(lo);
    let last = (t0 + 3).min(hi);
    let mut best: [Option<(usize, f64)>; 2] = [None, None];
    for t in first..=last {
        if side(t) != target {
            continue;
        }
        let d = (t as f64 - x).abs();
        match best {
            [None, _] => best[0] = Some((t, d)),
            [Some((_, d0)), None] => {
                if d < d0 {
                    best = [Some((t, d)), best[0]];
                } else {
                    best[1] = Some((t, d));
                }
            }
            [Some((_, d0)), Some((_, d1))] => {
                if d < d0 {
                    best = [Some((t, d)), best[0]];
                } else if d < d1 {
                    best[1] = Some((t, d));
                }
            }
        }
    }
    match best {
        [Some((t, _)), Some((u, _))] => {
            let (vt, vu) = (val(t), val(u));
            vt + (x - t as f64) * (vu - vt) / (u as f64 - t as f64)
        }
        [Some((t, _)), None] => val(t),
        _ => linear(),
    }
}

impl<'a> RowSolver<'a> {
    fn new(geo: &'a Geometry<'a>, i: usize, a_rows: &'a [f64]) -> Self {
        let prob = geo.prob;
        let jumps = (0..prob.n)
            .map(|k| jump_invariant(&geo.table, prob.p, i, k))
            .collect();
        let scale = (0..prob.n)
            .map(|k| geo.table.range(k).0.abs() + geo.table.range(k).1.abs())
            .fold(0.0, f64::max);
        RowSolver {
            geo,
            i,
            a_rows,
            jumps,
            side_tol: 1e-9 * scale * prob.grid.h(),
        }
    }

    fn a_row(&self, k: usize, j: usize, b: usize) -> f64 {
        let n = self.geo.prob.n;
        let len = self.geo.prob.grid.len();
        self.a_rows[(k * n + j) * len + b]
    }

    fn sign(&self, s: f64) -> i8 {
        if s > self.side_tol {
            1
        } else if s < -self.side_tol {
            -1
        } else {
            0
        }
    }

    fn phi_k(&self, k: usize, s: &Sample) -> f64 {
        match s.loc {
            Loc::Row { b, .. } => self.geo.table.node(k, b),
            Loc::End(_) => self.geo.phi(k, s.zeta),
        }
    }

    fn side(&self, k: usize, s: &Sample) -> i8 {
        match self.jumps[k] {
            Some(c) => self.sign(s.phi_i - self.phi_k(k, s) - c),
            None => 0,
        }
    }

    /// K_ik at a sample, seen from side `target` of the jump curve of (i, k).
    fn value(&self, field: &KernelField, k: usize, s: &Sample, target: i8) -> f64 {
        let geo = self.geo;
        let grid = &geo.prob.grid;
        let n = grid.cells();
        let e = field.entry(self.i, k);
        let table = &geo.table;
        let i = self.i;
        let jump = self.jumps[k];
        let target = if jump.is_some() { target } else { 0 };
        let c = jump.unwrap_or(0.0);
        let row = |b: usize, a0: usize, tau: f64| {
            let pk = table.node(k, b);
            one_sided(
                |a| e[tri(a, b)],
                |a| self.sign(table.node(i, a) - pk - c),
                b,
                n,
                a0,
                tau,
                target,
            )
        };
        match s.loc {
            Loc::Row { b, x } => row(b, x.a0 as usize, x.tau),
            Loc::End(EndKind::Bottom(z)) => {
                let (a0, tau) = grid.locate(z);
                row(0, a0, tau)
            }
            Loc::End(EndKind::Right(zeta)) => {
                let (b0, tau) = grid.locate(zeta);
                let pi = table.node(i, n);
                one_sided(
                    |b| e[tri(n, b)],
                    |b| self.sign(pi - table.node(k, b) - c),
                    0,
                    n,
                    b0,
                    tau,
                    target,
                )
            }
            Loc::End(EndKind::Diag(w)) => {
                let (a, t) = grid.locate(w);
                e[tri(a, a)] + t * (e[tri(a + 1, a + 1)] - e[tri(a, a)])
            }
        }
    }

    fn end_sample(&self, end: &End) -> Sample {
        let z = match end.kind {
            EndKind::Diag(w) => w,
            EndKind::Bottom(z) => z,
            EndKind::Right(_) => 1.0,
        };
        Sample {
            zeta: end.zeta,
            phi_i: self.geo.phi(self.i, z),
            loc: Loc::End(end.kind),
        }
    }

    fn row_sample(&self, j: usize, c: f64, b: usize, x: Crossing) -> Sample {
        let geo = self.geo;
        Sample {
            zeta: geo.prob.grid.z(b),
            phi_i: c + geo.table.node(j, b),
            loc: Loc::Row { b, x },
        }
    }

    fn a_at(&self, k: usize, j: usize, s: &Sample, a_end: &[f64]) -> f64 {
        match s.loc {
            Loc::Row { b, .. } => self.a_row(k, j, b),
            Loc::End(_) => a_end[k],
        }
    }

    /// ∫ Σ_{k≠j} K_ik A_kj dζ from sample p to sample q, trapezoid on each
    /// side of any jump curve crossed in between.
    fn segment(&self, field: &KernelField, j: usize, p: &Sample, q: &Sample, a_end: &[f64]) -> f64 {
        let d = q.zeta - p.zeta;
        if d == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for k in 0..self.geo.prob.n {
            if k == j {
                continue;
            }
            let ap = self.a_at(k, j, p, a_end);
            let aq = self.a_at(k, j, q, a_end);
            if ap == 0.0 && aq == 0.0 {
                continue;
            }
            let (sp, sq) = (self.side(k, p), self.side(k, q));
            if sp != 0 && sq != 0 && sp != sq {
                let c = self.jumps[k].unwrap();
                let gp = (p.phi_i - self.phi_k(k, p) - c).abs();
                let gq = (q.phi_i - self.phi_k(k, q) - c).abs();
                let theta = gp / (gp + gq);
                let vp = self.value(field, k, p, sp);
                let vq = self.value(field, k, q, sq);
                acc += d * (theta * ap * vp + (1.0 - theta) * aq * vq);
            } else {
                let side = if sp != 0 { sp } else { sq };
                let vp = self.value(field, k, p, side);
                let vq = self.value(field, k, q, side);
                acc += 0.5 * d * (ap * vp + aq * vq);
            }
        }
        acc
    }

    fn end_value(&self, k_field: &KernelField, j: usize, end: &End) -> f64 {
        if !end.coupled {
            return end.y;
        }
        let prob = self.geo.prob;
        let EndKind::Bottom(z) = end.kind else {
            unreachable!("coupled data lives on the bottom edge")
        };
        let s = Sample {
            zeta: 0.0,
            phi_i: self.geo.phi(self.i, z),
            loc: Loc::End(end.kind),
        };
        let mut y = 0.0;
        for k in prob.p..prob.n {
            let q = prob.q0[(k - prob.p, j)];
            if q == 0.0 {
                continue;
            }
            let side = self.side(k, &s);
            y -= self.value(k_field, k, &s, side) * prob.lambda[k][0] * q;
        }
        y
    }

    /// Cumulative integrals along each characteristic of the plan.
    fn sweep_chars(&self, k_field: &KernelField, plan: &EntryPlan, f_buf: &mut Vec<f64>) {
        f_buf.clear();
        f_buf.resize(plan.crossings.len(), 0.0);
        for ch in &plan.chars {
            if ch.count == 0 {
                continue;
            }
            let mut prev = self.end_sample(&ch.end);
            let mut acc = 0.0;
            for idx in 0..ch.count {
                let b = (ch.first_row + ch.step * idx as isize) as usize;
                let cur = self.row_sample(plan.j, ch.c, b, plan.crossings[ch.offset + idx]);
                acc += self.segment(k_field, plan.j, &prev, &cur, &ch.a_end);
                f_buf[ch.offset + idx] = acc;
                prev = cur;
            }
        }
    }

    fn direct(&self, k_field: &KernelField, plan: &EntryPlan, node: &NodeInfo, a: usize, b: usize) -> f64 {
        let geo = self.geo;
        let n = geo.prob.grid.cells();
        let (i, j) = (self.i, plan.j);
        let mut prev = self.end_sample(&node.end);
        let mut acc = 0.0;
        let first = geo.first_row(plan.down, node.end.zeta);
        let step: isize = if plan.down { 1 } else { -1 };
        let mut r = first;
        while (plan.down && r < b as isize) || (!plan.down && r > b as isize) {
            let rb = r as usize;
            if let Some(x) = geo.crossing(i, j, node.c, rb) {
                let cur = self.row_sample(j, node.c, rb, x);
                acc += self.segment(k_field, j, &prev, &cur, &node.a_end);
                prev = cur;
            }
            r += step;
        }
        let x = if a == n {
            Crossing { a0: (n - 1) as u32, tau: 1.0 }
        } else {
            Crossing { a0: a as u32, tau: 0.0 }
        };
        let cur = self.row_sample(j, node.c, b, x);
        acc + self.segment(k_field, j, &prev, &cur, &node.a_end)
    }

    /// Recompute entry (i, j) from the current field; returns the largest change.
    fn update(&self, k_field: &mut KernelField, plan: &EntryPlan, f_buf: &mut Vec<f64>, out: &mut Vec<f64>) -> f64 {
        self.sweep_chars(k_field, plan, f_buf);
        let grid = &self.geo.prob.grid;
        let n = grid.cells();
        let j = plan.j;
        out.clear();
        out.resize(tri_count(grid), 0.0);
        let mut idx = 0;
        for a in 0..=n {
            for b in 0..=a {
                let node = &plan.nodes[idx];
                let y_end = self.end_value(k_field, j, &node.end);
                let f = match node.rule {
                    NodeRule::OnBoundary => 0.0,
                    NodeRule::Blend { r, t } => {
                        let pick = |ch: &Characteristic| {
                            let k = ((b as isize - ch.first_row) * ch.step) as usize;
                            f_buf[ch.offset + k]
                        };
                        (1.0 - t) * pick(&plan.chars[r]) + t * pick(&plan.chars[r + 1])
                    }
                    NodeRule::Direct => self.direct(k_field, plan, node, a, b),
                };
                out[idx] = (y_end + f) / self.geo.prob.lambda[j][b];
                idx += 1;
            }
        }
        let e = k_field.entry_mut(self.i, j);
        let mut change = 0.0_f64;
        for (dst, v) in e.iter_mut().zip(out.iter()) {
            change = change.max((*dst - v).abs());
            *dst = *v;
        }
        change
    }
}

/// Solve a controller-form kernel problem.
pub fn solve_kernel(prob: &KernelProblem<'_>) -> Result<(KernelField, KernelStats), KernelError> {
    let n = prob.n;
    let grid = prob.grid;
    let table = CharTable::new(grid, prob.p, &prob.lambda);
    let bc_map = prob
        .bcs
        .iter()
        .map(|bc| ((bc.i, bc.j), bc.value.clone()))
        .collect();
    let geo = Geometry { prob, table, bc_map };
    let len = grid.len();
    let mut a_rows = vec![0.0; n * n * len];
    for k in 0..n {
        for j in 0..n {
            for b in 0..len {
                a_rows[(k * n + j) * len + b] = (prob.a_fn)(k, j, grid.z(b));
            }
        }
    }
    let mut field = KernelField::zeros(grid, n, n);
    let mut sweeps = Vec::with_capacity(n);
    let mut final_change = 0.0_f64;
    let mut f_buf = Vec::new();
    let mut out = Vec::new();
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| {
            let lx = geo.phi(i, 1.0).abs() + geo.phi(x, 1.0).abs();
            let ly = geo.phi(i, 1.0).abs() + geo.phi(y, 1.0).abs();
            lx.partial_cmp(&ly).unwrap().then(x.cmp(&y))
        });
        let plans = order
            .iter()
            .map(|&j| geo.plan(i, j))
            .collect::<Result<Vec<_>, _>>()?;
        let solver = RowSolver::new(&geo, i, &a_rows);
        let mut it = 0;
        loop {
            it += 1;
            let mut change = 0.0_f64;
            for plan in &plans {
                change = change.max(solver.update(&mut field, plan, &mut f_buf, &mut out));
            }
            if !change.is_finite() {
                return Err(KernelError::NonFinite { row: i });
            }
            let scale = 1.0 + (0..n).map(|j| max_abs_slice(field.entry(i, j))).fold(0.0, f64::max);
            if change <= prob.tol * scale {
                final_change = final_change.max(change);
                break;
            }
            if it >= prob.max_iter {
                return Err(KernelError::NoConvergence {
                    row: i,
                    iters: it,
                    change,
                });
            }
        }
        sweeps.push(it);
    }
    Ok((field, KernelStats { sweeps, final_change }))
}

fn max_abs_slice(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Controller kernel K(z, ζ) of the plant.
pub fn solve_controller_kernel(
    spec: &PlantSpec,
    params: &DesignParams,
) -> Result<(KernelField, KernelStats), KernelError> {
    let grid = Grid::unchecked(params.grid);
    let lambda: Vec<Vec<f64>> = spec.lambda.iter().map(|f| f.sample(&grid)).collect();
    let lambda_fn = |i: usize, z: f64| spec.lambda[i].eval_unchecked(z);
    let a_fn = |i: usize, j: usize, z: f64| spec.a[i][j].eval_unchecked(z);
    let bcs = params
        .controller_bcs
        .iter()
        .filter(|bc| artificial_bc_kind(spec.n, spec.p, bc.i, bc.j).is_some())
        .cloned()
        .collect();
    let prob = KernelProblem {
        grid,
        n: spec.n,
        p: spec.p,
        lambda,
        lambda_fn: &lambda_fn,
        a_fn: &a_fn,
        q0: spec.q0.clone(),
        bcs,
        tol: params.kernel_tol,
        max_iter: params.kernel_max_iter,
    };
    solve_kernel(&prob)
}

/// K(z,0) Λ(0) (E₁ + E₂ Q₀) at node a.
pub fn boundary_product(k: &KernelField, lambda0: &[f64], q0: &DMatrix<f64>, p: usize, a: usize) -> DMatrix<f64> {
    let (rows, n) = k.shape();
    let mut out = DMatrix::zeros(rows, p);
    for i in 0..rows {
        for j in 0..p {
            let mut v = k.get(i, j, a, 0) * lambda0[j];
            for l in p..n {
                v += k.get(i, l, a, 0) * lambda0[l] * q0[(l - p, j)];
            }
            out[(i, j)] = v;
        }
    }
    out
}

/// A₀(z): strictly lower triangular top block and full bottom block taken
/// from the kernel boundary trace.
pub fn extract_a0(k: &KernelField, sp: &SampledPlant, q0: &DMatrix<f64>, p: usize) -> SpatialMatrixFunction {
    let lambda0: Vec<f64> = sp.lambda.iter().map(|l| l[0]).collect();
    SpatialMatrixFunction::from_fn(*k.grid(), |a| {
        let mut m = boundary_product(k, &lambda0, q0, p, a);
        for i in 0..p {
            for j in i..p {
                m[(i, j)] = 0.0;
            }
        }
        m
    })
}

/// Largest |[E₁ᵀK(z,0)Λ(0)(E₁+E₂Q₀)]_{i≤j}| over all nodes.
pub fn boundary_residual(k: &KernelField, lambda0: &[f64], q0: &DMatrix<f64>, p: usize) -> f64 {
    let mut worst = 0.0_f64;
    for a in 0..k.grid().len() {
        let m = boundary_product(k, lambda0, q0, p, a);
        for i in 0..p {
            for j in i..p {
                worst = worst.max(m[(i, j)].abs());
            }
        }
    }
    worst
}

/// Largest deviation from K(z,z)Λ(z) − Λ(z)K(z,z) = A(z) over nodes. The
/// corner z = ζ = 0 of entries fed from the bottom edge carries the
/// boundary value and is skipped.
pub fn diagonal_residual(
    k: &KernelField,
    p: usize,
    lambda: &[Vec<f64>],
    a_fn: &dyn Fn(usize, usize, f64) -> f64,
) -> f64 {
    let n = lambda.len();
    let grid = *k.grid();
    let mut worst = 0.0_f64;
    for a in 0..grid.len() {
        for i in 0..n {
            for j in 0..n {
                if i == j || (a == 0 && traced_down(p, i, j)) {
                    continue;
                }
                let lhs = k.get(i, j, a, a) * (lambda[j][a] - lambda[i][a]);
                worst = worst.max((lhs - a_fn(i, j, grid.z(a))).abs());
            }
        }
    }
    worst
}

/// G(z) = K(z,0)Λ(0)E₂C₂ + C₁(z) − ∫₀ᶻ K(z,ζ)C₁(ζ)dζ.
pub fn compute_g(k: &KernelField, sp: &SampledPlant, c2: &DMatrix<f64>, p: usize) -> SpatialMatrixFunction {
    let grid = *k.grid();
    let (n, _) = k.shape();
    let nx = c2.ncols();
    let h = grid.h();
    SpatialMatrixFunction::from_fn(grid, |a| {
        let mut g = sp.c1.at(a).clone();
        for i in 0..n {
            for c in 0..nx {
                let mut v = 0.0;
                for l in p..n {
                    v += k.get(i, l, a, 0) * sp.lambda[l][0] * c2[(l - p, c)];
                }
                g[(i, c)] += v;
            }
        }
        if !sp.c1_zero && a > 0 {
            for b in 0..=a {
                let w = if b == 0 || b == a { 0.5 * h } else { h };
                let c1 = sp.c1.at(b);
                for i in 0..n {
                    for c in 0..nx {
                        let mut v = 0.0;
                        for l in 0..n {
                            v += k.get(i, l, a, b) * c1[(l, c)];
                        }
                        g[(i, c)] -= w * v;
                    }
                }
            }
        }
        g
    })
}

/// Residual of Λ(z)∂_zK + ∂_ζ(KΛ(ζ)) − KA(ζ) by centered differences at
/// interior nodes whose stencil stays at least `band` (in z units) away
/// from every jump line of the same kernel row. Returns (sup, mean) of the
/// entrywise absolute residual over the retained nodes.
pub fn interior_residual(
    k: &KernelField,
    p: usize,
    lambda: &[Vec<f64>],
    a_samples: &SpatialMatrixFunction,
    band: f64,
) -> (f64, f64) {
    let grid = *k.grid();
    let n = grid.cells();
    let h = grid.h();
    let (rows, cols) = k.shape();
    let table = CharTable::new(grid, p, lambda);
    let mut sup = 0.0_f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..rows {
        let jumps: Vec<(usize, f64)> = (0..cols)
            .filter_map(|j| jump_invariant(&table, p, i, j).map(|c| (j, c)))
            .collect();
        let fast = lambda[i].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for a in 2..n {
            for b in 1..a - 1 {
                let near = jumps
                    .iter()
                    .any(|&(j, c)| (table.node(i, a) - table.node(j, b) - c).abs() * fast < band);
                if near {
                    continue;
                }
                let am = a_samples.at(b);
                for j in 0..cols {
                    let dz = (k.get(i, j, a + 1, b) - k.get(i, j, a - 1, b)) / (2.0 * h);
                    let dy = (k.get(i, j, a, b + 1) * lambda[j][b + 1]
                        - k.get(i, j, a, b - 1) * lambda[j][b - 1])
                        / (2.0 * h);
                    let mut rhs = 0.0;
                    for l in 0..cols {
                        rhs += k.get(i, l, a, b) * am[(l, j)];
                    }
                    let r = (lambda[i][a] * dz + dy - rhs).abs();
                    sup = sup.max(r);
                    sum += r;
                    count += 1;
                }
            }
        }
    }
    (sup, if count > 0 { sum / count as f64 } else { 0.0 })
}
