//! Plant data model: grids, coefficient functions, sampled matrix
//! functions, the plant description and its structural validation.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::expr::{self, Expr, ExprError};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("expression `{src}`: {err}")]
    Expr { src: String, err: ExprError },
    #[error("z = {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("grid needs at least {min} cells, got {got}")]
    GridTooCoarse { got: usize, min: usize },
    #[error("table needs at least two samples")]
    TableTooShort,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid design parameter: {0}")]
    Design(String),
}

pub const MIN_GRID: usize = 16;
pub const DEFAULT_GRID: usize = 200;

/// Uniform grid on [0, 1] with `n` cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    n: usize,
}

impl Grid {
    pub fn new(n: usize) -> Result<Self, ModelError> {
        if n < MIN_GRID {
            return Err(ModelError::GridTooCoarse { got: n, min: MIN_GRID });
        }
        Ok(Grid { n })
    }

    /// Grid without the lower bound on the cell count; used for
    /// auxiliary problems such as coarse self-convergence levels.
    pub fn unchecked(n: usize) -> Self {
        assert!(n >= 1);
        Grid { n }
    }

    pub fn cells(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn z(&self, k: usize) -> f64 {
        k as f64 / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|k| self.z(k)).collect()
    }

    /// Cell index and fractional position of `z` (clamped to [0, 1]).
    /// Positions within a few ulps of a node snap onto it.
    pub fn locate(&self, z: f64) -> (usize, f64) {
        let cells = self.n as f64;
        let mut s = z.clamp(0.0, 1.0) * cells;
        let r = s.round();
        if (s - r).abs() <= 4.0 * f64::EPSILON * cells {
            s = r;
        }
        let k = (s.floor() as usize).min(self.n - 1);
        (k, s - k as f64)
    }

    /// Trapezoid weight of node `k` on the full interval.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.n {
            0.5 * self.h()
        } else {
            self.h()
        }
    }
}

/// A scalar coefficient of z in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarFunction {
    Expr { src: String, ast: Expr },
    /// Samples on a uniform grid over [0, 1], linear in between.
    Table(Vec<f64>),
}

impl ScalarFunction {
    pub fn constant(v: f64) -> Self {
        ScalarFunction::Expr {
            src: format!("{v:?}"),
            ast: Expr::Num(v),
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn table(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() < 2 {
            return Err(ModelError::TableTooShort);
        }
        Ok(ScalarFunction::Table(values))
    }

    pub fn eval(&self, z: f64) -> Result<f64, ModelError> {
        if !(0.0..=1.0).contains(&z) {
            return Err(ModelError::OutOfRange(z));
        }
        Ok(self.eval_unchecked(z))
    }

    /// Evaluation without the range check, for hot loops over grid nodes.
    pub fn eval_unchecked(&self, z: f64) -> f64 {
        match self {
            ScalarFunction::Expr { ast, .. } => ast.eval(z),
            ScalarFunction::Table(v) => {
                let (k, t) = Grid::unchecked(v.len() - 1).locate(z);
                if t == 1.0 {
                    v[k + 1]
                } else {
                    v[k] + t * (v[k + 1] - v[k])
                }
            }
        }
    }

    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.len()).map(|k| self.eval_unchecked(grid.z(k))).collect()
    }

    /// Table-backed copy sampled on `grid`.
    pub fn to_table(&self, grid: &Grid) -> Self {
        ScalarFunction::Table(self.sample(grid))
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ScalarFunction::Expr { ast, .. } => *ast == Expr::Num(0.0),
            ScalarFunction::Table(v) => v.iter().all(|&x| x == 0.0),
        }
    }
}

impl fmt::Display for ScalarFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarFunction::Expr { src, .. } => write!(f, "{src}"),
            ScalarFunction::Table(v) => write!(f, "table[{}]", v.len()),
        }
    }
}

pub fn parse_expression(src: &str) -> Result<ScalarFunction, ModelError> {
    let ast = expr::parse(src).map_err(|err| ModelError::Expr {
        src: src.to_string(),
        err,
    })?;
    Ok(ScalarFunction::Expr {
        src: src.to_string(),
        ast,
    })
}

/// Matrix-valued function of z sampled at every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMatrixFunction {
    grid: Grid,
    rows: usize,
    cols: usize,
    values: Vec<DMatrix<f64>>,
}

impl SpatialMatrixFunction {
    pub fn zeros(grid: Grid, rows: usize, cols: usize) -> Self {
        SpatialMatrixFunction {
            grid,
            rows,
            cols,
            values: vec![DMatrix::zeros(rows, cols); grid.len()],
        }
    }

    pub fn from_values(grid: Grid, values: Vec<DMatrix<f64>>) -> Self {
        assert_eq!(values.len(), grid.len(), "one value per node");
        let (rows, cols) = values[0].shape();
        assert!(values.iter().all(|m| m.shape() == (rows, cols)));
        SpatialMatrixFunction {
            grid,
            rows,
            cols,
            values,
        }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize) -> DMatrix<f64>) -> Self {
        Self::from_values(grid, (0..grid.len()).map(&mut f).collect())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        &self.values[k]
    }

    pub fn at_mut(&mut self, k: usize) -> &mut DMatrix<f64> {
        &mut self.values[k]
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn eval(&self, z: f64) -> Result<DMatrix<f64>, ModelError> {
        if !(0.0..=1.0).contains(&z) {
            return Err(ModelError::OutOfRange(z));
        }
        let (k, t) = self.grid.locate(z);
        Ok(&self.values[k] * (1.0 - t) + &self.values[k + 1] * t)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(linalg::max_abs).fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self::from_values(self.grid, self.values.iter().map(f).collect())
    }
}

/// The heterodirectional PDE-ODE plant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub n: usize,
    pub p: usize,
    pub n_xi: usize,
    pub lambda: Vec<ScalarFunction>,
    pub a: Vec<Vec<ScalarFunction>>,
    pub c1: Vec<Vec<ScalarFunction>>,
    pub q0: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c2: DMatrix<f64>,
}

impl PlantSpec {
    pub fn m(&self) -> usize {
        self.n - self.p
    }

    pub fn check_dimensions(&self) -> Result<(), ModelError> {
        let (n, p, nx) = (self.n, self.p, self.n_xi);
        let dim = |msg: String| Err(ModelError::Dimension(msg));
        if p == 0 || p >= n {
            return dim(format!("need 1 <= p < n, got p = {p}, n = {n}"));
        }
        if nx == 0 {
            return dim("n_xi must be positive".into());
        }
        let m = n - p;
        if self.lambda.len() != n {
            return dim(format!("lambda has {} entries, expected {n}", self.lambda.len()));
        }
        if self.a.len() != n || self.a.iter().any(|r| r.len() != n) {
            return dim(format!("A must be {n}x{n}"));
        }
        if self.c1.len() != n || self.c1.iter().any(|r| r.len() != nx) {
            return dim(format!("C1 must be {n}x{nx}"));
        }
        let checks = [
            ("Q0", &self.q0, (m, p)),
            ("Q1", &self.q1, (p, m)),
            ("F", &self.f, (nx, nx)),
            ("B", &self.b, (nx, p)),
            ("C2", &self.c2, (m, nx)),
        ];
        for (name, mat, shape) in checks {
            if mat.shape() != shape {
                return dim(format!(
                    "{name} is {}x{}, expected {}x{}",
                    mat.nrows(),
                    mat.ncols(),
                    shape.0,
                    shape.1
                ));
            }
        }
        Ok(())
    }

    pub fn sample(&self, grid: &Grid) -> SampledPlant {
        let lambda: Vec<Vec<f64>> = self.lambda.iter().map(|f| f.sample(grid)).collect();
        let a = SpatialMatrixFunction::from_fn(*grid, |k| {
            let z = grid.z(k);
            DMatrix::from_fn(self.n, self.n, |i, j| self.a[i][j].eval_unchecked(z))
        });
        let c1 = SpatialMatrixFunction::from_fn(*grid, |k| {
            let z = grid.z(k);
            DMatrix::from_fn(self.n, self.n_xi, |i, j| self.c1[i][j].eval_unchecked(z))
        });
        let c1_zero = self.c1.iter().flatten().all(|f| f.is_zero());
        SampledPlant {
            grid: *grid,
            lambda,
            a,
            c1,
            c1_zero,
        }
    }
}

/// Plant coefficients sampled on the shared grid.
#[derive(Debug, Clone)]
pub struct SampledPlant {
    pub grid: Grid,
    /// `lambda[i][k]` = λ_i(z_k)
    pub lambda: Vec<Vec<f64>>,
    pub a: SpatialMatrixFunction,
    pub c1: SpatialMatrixFunction,
    pub c1_zero: bool,
}

impl SampledPlant {
    pub fn lambda_diag(&self, k: usize) -> DMatrix<f64> {
        let n = self.lambda.len();
        DMatrix::from_fn(n, n, |i, j| if i == j { self.lambda[i][k] } else { 0.0 })
    }

    pub fn max_speed(&self) -> f64 {
        self.lambda
            .iter()
            .flatten()
            .fold(0.0_f64, |acc, &l| acc.max(l.abs()))
    }
}

/// Key of an artificial boundary condition of a kernel problem
/// (0-based entry indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ArtificialBcKind {
    /// Row-1 block below the diagonal, imposed at z = 1.
    L,
    /// Row-2 block on and below the diagonal, imposed at ζ = 0.
    M,
    /// Row-2 block above the diagonal, imposed at z = 1.
    N,
}

pub fn artificial_bc_kind(n: usize, p: usize, i: usize, j: usize) -> Option<ArtificialBcKind> {
    if i >= n || j >= n {
        return None;
    }
    if i < p && j < p && i > j {
        Some(ArtificialBcKind::L)
    } else if i >= p && j >= p && i >= j {
        Some(ArtificialBcKind::M)
    } else if i >= p && j >= p && i < j {
        Some(ArtificialBcKind::N)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtificialBc {
    pub i: usize,
    pub j: usize,
    pub value: ScalarFunction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignParams {
    pub controller_poles: Vec<Complex64>,
    pub observer_poles: Vec<Complex64>,
    pub controller_bcs: Vec<ArtificialBc>,
    pub observer_bcs: Vec<ArtificialBc>,
    pub grid: usize,
    pub kernel_tol: f64,
    pub kernel_max_iter: usize,
    pub seed: u64,
}

impl Default for DesignParams {
    fn default() -> Self {
        DesignParams {
            controller_poles: Vec::new(),
            observer_poles: Vec::new(),
            controller_bcs: Vec::new(),
            observer_bcs: Vec::new(),
            grid: DEFAULT_GRID,
            kernel_tol: 1e-10,
            kernel_max_iter: 200,
            seed: 0,
        }
    }
}

impl DesignParams {
    pub fn check(&self, spec: &PlantSpec) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Design(m));
        for (name, poles) in [
            ("controller", &self.controller_poles),
            ("observer", &self.observer_poles),
        ] {
            if poles.len() != spec.n_xi {
                return bad(format!(
                    "{name} pole set has {} entries, expected {}",
                    poles.len(),
                    spec.n_xi
                ));
            }
            if let Err(m) = check_pole_set(poles) {
                return bad(format!("{name} poles: {m}"));
            }
        }
        if self.grid < MIN_GRID {
            return bad(format!("grid N = {} is below {MIN_GRID}", self.grid));
        }
        if !(self.kernel_tol > 0.0) || self.kernel_max_iter == 0 {
            return bad("kernel tolerance and iteration cap must be positive".into());
        }
        for (side, bcs) in [("controller", &self.controller_bcs), ("observer", &self.observer_bcs)] {
            for bc in bcs {
                if artificial_bc_kind(spec.n, spec.p, bc.i, bc.j).is_none() {
                    return bad(format!(
                        "{side} artificial BC ({}, {}) is not a free kernel boundary value",
                        bc.i + 1,
                        bc.j + 1
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, ModelError> {
        Grid::new(self.grid)
    }
}

/// Conjugate symmetry and strict stability of a pole multiset.
pub fn check_pole_set(poles: &[Complex64]) -> Result<(), String> {
    let mut used = vec![false; poles.len()];
    for (k, z) in poles.iter().enumerate() {
        if !(z.re < 0.0) {
            return Err(format!("pole {z} is not in the open left half-plane"));
        }
        if used[k] || z.im == 0.0 {
            continue;
        }
        let partner = (0..poles.len()).find(|&l| {
            !used[l] && l != k && (poles[l] - z.conj()).norm() <= 1e-12 * (1.0 + z.norm())
        });
        match partner {
            Some(l) => {
                used[k] = true;
                used[l] = true;
            }
            None => return Err(format!("pole {z} has no conjugate partner")),
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    SpeedOrdering { z: f64, detail: String },
    NonzeroDiagonal { i: usize, z: f64, value: f64 },
    NotStabilizable { eigenvalue: Complex64 },
    NonFinite { what: String, z: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::SpeedOrdering { z, detail } => {
                write!(f, "speed ordering violated at z = {z}: {detail}")
            }
            Violation::NonzeroDiagonal { i, z, value } => {
                write!(f, "A[{i}][{i}](z = {z}) = {value} but the diagonal of A must vanish", i = i + 1)
            }
            Violation::NotStabilizable { eigenvalue } => {
                write!(f, "(F, B) not stabilizable: mode {eigenvalue} fails the rank test")
            }
            Violation::NonFinite { what, z } => write!(f, "{what} is not finite at z = {z}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "plant valid");
        }
        for v in &self.violations {
            writeln!(f, "violation: {v}")?;
        }
        Ok(())
    }
}

pub fn validate_plant(spec: &PlantSpec, grid: &Grid) -> ValidationReport {
    let mut out = Vec::new();
    let (n, p) = (spec.n, spec.p);
    for k in 0..grid.len() {
        let z = grid.z(k);
        let lam: Vec<f64> = spec.lambda.iter().map(|f| f.eval_unchecked(z)).collect();
        if let Some(i) = lam.iter().position(|l| !l.is_finite()) {
            out.push(Violation::NonFinite {
                what: format!("lambda[{}]", i + 1),
                z,
            });
            break;
        }
        let mut detail = None;
        for i in 0..p {
            if !(lam[i] > 0.0) {
                detail = Some(format!("lambda[{}] = {} must be positive", i + 1, lam[i]));
                break;
            }
        }
        if detail.is_none() {
            for i in p..n {
                if !(lam[i] < 0.0) {
                    detail = Some(format!("lambda[{}] = {} must be negative", i + 1, lam[i]));
                    break;
                }
            }
        }
        if detail.is_none() {
            for i in 0..n - 1 {
                if i + 1 == p {
                    continue;
                }
                if !(lam[i] > lam[i + 1]) {
                    detail = Some(format!(
                        "lambda[{}] = {} must exceed lambda[{}] = {}",
                        i + 1,
                        lam[i],
                        i + 2,
                        lam[i + 1]
                    ));
                    break;
                }
            }
        }
        // the first offending node is enough
        if let Some(detail) = detail {
            out.push(Violation::SpeedOrdering { z, detail });
            break;
        }
    }
    for i in 0..n {
        for k in 0..grid.len() {
            let z = grid.z(k);
            let v = spec.a[i][i].eval_unchecked(z);
            if v != 0.0 {
                out.push(Violation::NonzeroDiagonal { i, z, value: v });
                break;
            }
        }
        for j in 0..n {
            if let Some(k) = (0..grid.len()).find(|&k| !spec.a[i][j].eval_unchecked(grid.z(k)).is_finite()) {
                out.push(Violation::NonFinite {
                    what: format!("A[{}][{}]", i + 1, j + 1),
                    z: grid.z(k),
                });
            }
        }
        for j in 0..spec.n_xi {
            if let Some(k) = (0..grid.len()).find(|&k| !spec.c1[i][j].eval_unchecked(grid.z(k)).is_finite()) {
                out.push(Violation::NonFinite {
                    what: format!("C1[{}][{}]", i + 1, j + 1),
                    z: grid.z(k),
                });
            }
        }
    }
    for mu in linalg::unstabilizable_modes(&spec.f, &spec.b) {
        out.push(Violation::NotStabilizable { eigenvalue: mu });
    }
    ValidationReport { violations: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_basics() {
        let g = Grid::new(20).unwrap();
        assert_eq!(g.len(), 21);
        assert_eq!(g.z(20), 1.0);
        assert!(Grid::new(8).is_err());
        let (k, t) = g.locate(1.0);
        assert_eq!((k, t), (19, 1.0));
        let w: f64 = (0..g.len()).map(|k| g.weight(k)).sum();
        assert!((w - 1.0).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_is_error() {
        let f = parse_expression("z").unwrap();
        assert!(matches!(f.eval(1.5), Err(ModelError::OutOfRange(_))));
        assert!(f.eval(-0.1).is_err());
        assert_eq!(f.eval(0.5).unwrap(), 0.5);
    }

    #[test]
    fn table_matches_expression_at_nodes() {
        let g = Grid::new(32).unwrap();
        let f = parse_expression("exp(3*z)*sin(z)").unwrap();
        let t = f.to_table(&g);
        for k in 0..g.len() {
            assert_eq!(t.eval(g.z(k)).unwrap(), f.eval(g.z(k)).unwrap());
        }
    }

    #[test]
    fn spatial_interpolation_hits_nodes() {
        let g = Grid::new(16).unwrap();
        let s = SpatialMatrixFunction::from_fn(g, |k| DMatrix::from_element(2, 1, g.z(k).powi(2)));
        for k in 0..g.len() {
            assert_eq!(s.eval(g.z(k)).unwrap(), *s.at(k));
        }
        let mid = s.eval(0.5 / 16.0).unwrap()[0];
        assert!((mid - 0.5 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn pole_sets() {
        let c = |re, im| Complex64::new(re, im);
        assert!(check_pole_set(&[c(-1.0, 0.0), c(-2.0, 1.0), c(-2.0, -1.0)]).is_ok());
        assert!(check_pole_set(&[c(-1.0, 0.0), c(-2.0, 1.0), c(-3.0, 0.0)]).is_err());
        assert!(check_pole_set(&[c(0.0, 0.0)]).is_err());
    }
}
