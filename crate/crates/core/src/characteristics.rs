//! Characteristic time maps φ_i(z) = ∫₀ᶻ dζ/λ_i(ζ), their inverses,
//! the composite map σ_ij and fundamental matrices along characteristics.

use nalgebra::DMatrix;

use crate::linalg::expm;
use crate::model::{Grid, PlantSpec, SampledPlant};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CharError {
    #[error("characteristic index {0} out of range")]
    Index(usize),
    #[error("z = {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("time {s} is outside the range [{lo}, {hi}] of phi_{i}")]
    TimeOutOfRange { i: usize, s: f64, lo: f64, hi: f64 },
    #[error("sigma({i}, {j}) needs i <= j <= p and phi_j(zeta) <= phi_i(z)")]
    SigmaDomain { i: usize, j: usize },
}

/// Sampled φ_i for every characteristic family on a shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CharTable {
    grid: Grid,
    p: usize,
    phi: Vec<Vec<f64>>,
}

impl CharTable {
    /// Cumulative trapezoid integration of 1/λ_i on the grid. The cell
    /// averages are summed with Neumaier compensation and scaled last, so
    /// constant speeds give φ_i(1) = 1/λ_i to the last bit.
    pub fn new(grid: Grid, p: usize, lambda: &[Vec<f64>]) -> Self {
        let cells = grid.cells() as f64;
        let phi = lambda
            .iter()
            .map(|lam| {
                let mut out = Vec::with_capacity(grid.len());
                let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
                out.push(0.0);
                for k in 1..grid.len() {
                    let c = 0.5 * (1.0 / lam[k - 1] + 1.0 / lam[k]);
                    let t = sum + c;
                    comp += if sum.abs() >= c.abs() { (sum - t) + c } else { (c - t) + sum };
                    sum = t;
                    out.push((sum + comp) / cells);
                }
                out
            })
            .collect();
        CharTable { grid, p, phi }
    }

    pub fn from_plant(sp: &SampledPlant, p: usize) -> Self {
        Self::new(sp.grid, p, &sp.lambda)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.phi.len()
    }

    /// φ_i at grid node `k`.
    pub fn node(&self, i: usize, k: usize) -> f64 {
        self.phi[i][k]
    }

    pub fn nodes(&self, i: usize) -> &[f64] {
        &self.phi[i]
    }

    fn check_index(&self, i: usize) -> Result<(), CharError> {
        if i >= self.phi.len() {
            Err(CharError::Index(i))
        } else {
            Ok(())
        }
    }

    pub fn phi(&self, i: usize, z: f64) -> Result<f64, CharError> {
        self.check_index(i)?;
        if !(0.0..=1.0).contains(&z) {
            return Err(CharError::OutOfRange(z));
        }
        Ok(self.phi_fast(i, z))
    }

    pub(crate) fn phi_fast(&self, i: usize, z: f64) -> f64 {
        let (k, t) = self.grid.locate(z);
        let v = &self.phi[i];
        v[k] + t * (v[k + 1] - v[k])
    }

    /// Range of φ_i as (min, max).
    pub fn range(&self, i: usize) -> (f64, f64) {
        let end = *self.phi[i].last().unwrap();
        if end >= 0.0 {
            (0.0, end)
        } else {
            (end, 0.0)
        }
    }

    pub fn phi_inverse(&self, i: usize, s: f64) -> Result<f64, CharError> {
        self.check_index(i)?;
        let (lo, hi) = self.range(i);
        let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
        if s < lo - slack || s > hi + slack || s.is_nan() {
            return Err(CharError::TimeOutOfRange { i, s, lo, hi });
        }
        Ok(self.phi_inverse_fast(i, s.clamp(lo, hi)))
    }

    /// Inverse without range checks; `s` must lie in the range of φ_i.
    pub(crate) fn phi_inverse_fast(&self, i: usize, s: f64) -> f64 {
        let v = &self.phi[i];
        let n = v.len() - 1;
        let inc = v[n] > 0.0;
        // |φ_i| is increasing: bisection on cells
        let key = |k: usize| if inc { v[k] } else { -v[k] };
        let target = if inc { s } else { -s };
        if target <= 0.0 {
            return 0.0;
        }
        if target >= key(n) {
            return 1.0;
        }
        let (mut lo, mut hi) = (0usize, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if key(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = (target - key(lo)) / (key(hi) - key(lo));
        (lo as f64 + t) * self.grid.h()
    }

    /// σ_ij(z, ζ) = φ_i⁻¹(φ_i(z) − φ_j(ζ)) for 0-based i ≤ j < p.
    pub fn sigma(&self, i: usize, j: usize, z: f64, zeta: f64) -> Result<f64, CharError> {
        self.check_index(i)?;
        self.check_index(j)?;
        if i > j || j >= self.p {
            return Err(CharError::SigmaDomain { i, j });
        }
        let arg = self.phi(i, z)? - self.phi(j, zeta)?;
        if arg < -1e-12 {
            return Err(CharError::SigmaDomain { i, j });
        }
        Ok(self.phi_inverse_fast(i, arg.max(0.0)))
    }

    /// Ψ = exp(M (φ_i(z) − φ_i(ζ))).
    pub fn fundamental_matrix(
        &self,
        m: &DMatrix<f64>,
        i: usize,
        z: f64,
        zeta: f64,
    ) -> Result<DMatrix<f64>, CharError> {
        let dt = self.phi(i, z)? - self.phi(i, zeta)?;
        Ok(expm(&(m * dt)))
    }

    /// t = Σ_{i ≤ p+1} |φ_i(1)|.
    pub fn settling_time(&self) -> f64 {
        (0..=self.p).map(|i| self.phi[i].last().unwrap().abs()).sum()
    }
}

pub fn fundamental_matrix(
    m: &DMatrix<f64>,
    table: &CharTable,
    i: usize,
    z: f64,
    zeta: f64,
) -> Result<DMatrix<f64>, CharError> {
    table.fundamental_matrix(m, i, z, zeta)
}

/// (t_c, t_o); both horizons are the same sum over the first p + 1 maps.
pub fn settling_times(spec: &PlantSpec, grid: &Grid) -> (f64, f64) {
    let lambda: Vec<Vec<f64>> = spec.lambda.iter().map(|f| f.sample(grid)).collect();
    let t = CharTable::new(*grid, spec.p, &lambda).settling_time();
    (t, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(lams: &[&dyn Fn(f64) -> f64], p: usize, n: usize) -> CharTable {
        let g = Grid::new(n).unwrap();
        let lambda: Vec<Vec<f64>> = lams
            .iter()
            .map(|f| (0..g.len()).map(|k| f(g.z(k))).collect())
            .collect();
        CharTable::new(g, p, &lambda)
    }

    #[test]
    fn constant_speed() {
        let t = table(&[&|_| 3.0, &|_| -1.0], 1, 30);
        assert_eq!(t.phi(0, 0.0).unwrap(), 0.0);
        assert!((t.phi(0, 1.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((t.phi(1, 1.0).unwrap() + 1.0).abs() < 1e-15);
        assert!((t.settling_time() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn inverse_of_constant_two() {
        let t = table(&[&|_| 2.0, &|_| -1.0], 1, 20);
        assert!((t.phi_inverse(0, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!(t.phi_inverse(0, 0.6).is_err());
        assert!((t.phi_inverse(1, -0.3).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn linear_reciprocal_speed_is_exact() {
        // λ = 1/(1+z): φ = z + z²/2 and the trapezoid rule is exact on 1 + z
        let t = table(&[&|z| 1.0 / (1.0 + z), &|_| -1.0], 1, 64);
        assert!((t.phi(0, 1.0).unwrap() - 1.5).abs() < 1e-13);
        assert!((t.phi_inverse(0, 1.5).unwrap() - 1.0).abs() < 1e-13);
        let z: f64 = 0.5;
        assert!((t.phi(0, z).unwrap() - (z + z * z / 2.0)).abs() < 1e-13);
    }

    #[test]
    fn sigma_properties() {
        let t = table(&[&|_| 3.0, &|_| 3.0 - 1e-9, &|_| -1.0], 2, 40);
        for k in 0..=40 {
            let z = k as f64 / 40.0;
            assert!((t.sigma(0, 1, z, 0.0).unwrap() - z).abs() < 1e-12);
            assert_eq!(t.sigma(0, 0, z, z).unwrap(), 0.0);
        }
        // equal constant speeds: σ = z − ζ
        assert!((t.sigma(0, 0, 0.8, 0.3).unwrap() - 0.5).abs() < 1e-12);
        assert!(t.sigma(1, 0, 0.5, 0.1).is_err());
        assert!(t.sigma(0, 2, 0.5, 0.1).is_err());
    }

    #[test]
    fn fundamental_matrix_scalar_and_semigroup() {
        let t = table(&[&|_| 2.0, &|_| -1.0], 1, 20);
        let a = DMatrix::from_element(1, 1, -0.7);
        let psi = t.fundamental_matrix(&a, 0, 0.9, 0.2).unwrap();
        assert!((psi[(0, 0)] - (-0.7 * 0.7 / 2.0f64).exp()).abs() < 1e-14);
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]);
        let ab = t.fundamental_matrix(&m, 1, 0.9, 0.4).unwrap() * t.fundamental_matrix(&m, 1, 0.4, 0.1).unwrap();
        let direct = t.fundamental_matrix(&m, 1, 0.9, 0.1).unwrap();
        assert!((ab - direct).amax() < 1e-10);
        let id = t.fundamental_matrix(&m, 0, 0.3, 0.3).unwrap();
        assert_eq!(id, DMatrix::identity(2, 2));
    }

    #[test]
    fn settling_examples() {
        let t = table(&[&|_| 1.0, &|_| -1.0], 1, 16);
        assert_eq!(t.settling_time(), 2.0);
        let t = table(&[&|_| 2.0, &|_| -0.5], 1, 16);
        assert!((t.settling_time() - 2.5).abs() < 1e-15);
    }
}
