//! Row-vector IVPs along characteristics,
//!
//! ```text
//! v'(z) = φ'(z) v(z) M + f(z),   v(0) = v₀,
//! ```
//!
//! solved as v(z) = v₀Ψ(z,0) + ∫₀ᶻ f(ζ)Ψ(z,ζ)dζ with Ψ(z,ζ) = exp(M(φ(z) − φ(ζ))).
//! φ is linear on each grid cell (it is the trapezoid integral of 1/λ) and
//! f is taken piecewise linear, so each cell contributes exactly
//! f_{a+1}I₀ − (Δf/h)I₁ with I_k = ∫₀ʰ u^k exp(Mκu) du.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::linalg::expm;

/// Per-cell propagation matrices for a given slope κ = Δφ/h.
#[derive(Debug, Clone)]
pub struct CellMaps {
    pub psi: DMatrix<f64>,
    pub i0: DMatrix<f64>,
    pub i1: DMatrix<f64>,
}

/// exp(Mκh), ∫₀ʰ exp(Mκu)du and ∫₀ʰ u exp(Mκu)du via one block exponential.
pub fn cell_maps(m: &DMatrix<f64>, kappa: f64, h: f64) -> CellMaps {
    let d = m.nrows();
    let mut big = DMatrix::zeros(3 * d, 3 * d);
    big.view_mut((0, 0), (d, d)).copy_from(&(m * (kappa * h)));
    for r in 0..d {
        big[(r, d + r)] = h;
        big[(d + r, 2 * d + r)] = h;
    }
    let e = expm(&big);
    let psi = e.view((0, 0), (d, d)).into_owned();
    let i0 = e.view((0, d), (d, d)).into_owned();
    let b13 = e.view((0, 2 * d), (d, d)).into_owned();
    let i1 = &i0 * h - b13;
    CellMaps { psi, i0, i1 }
}

/// Cache of cell maps keyed by the exact slope, so constant speeds cost a
/// single block exponential.
pub struct Propagator<'a> {
    m: &'a DMatrix<f64>,
    h: f64,
    cache: HashMap<u64, CellMaps>,
}

impl<'a> Propagator<'a> {
    pub fn new(m: &'a DMatrix<f64>, h: f64) -> Self {
        Propagator {
            m,
            h,
            cache: HashMap::new(),
        }
    }

    pub fn maps(&mut self, kappa: f64) -> &CellMaps {
        let (m, h) = (self.m, self.h);
        self.cache
            .entry(kappa.to_bits())
            .or_insert_with(|| cell_maps(m, kappa, h))
    }

    /// Node values of v for samples `phi` of φ and forcing `f` (r×d each).
    pub fn solve(&mut self, phi: &[f64], v0: &DMatrix<f64>, f: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let h = self.h;
        let mut out = Vec::with_capacity(phi.len());
        out.push(v0.clone());
        for a in 0..phi.len() - 1 {
            let kappa = (phi[a + 1] - phi[a]) / h;
            let cm = self.maps(kappa);
            let df = (&f[a + 1] - &f[a]) / h;
            let next = &out[a] * &cm.psi + &f[a + 1] * &cm.i0 - df * &cm.i1;
            out.push(next);
        }
        out
    }

    /// Ψ(z_a, 0) at every node.
    pub fn transition(&mut self, phi: &[f64]) -> Vec<DMatrix<f64>> {
        let d = self.m.nrows();
        let mut out = Vec::with_capacity(phi.len());
        out.push(DMatrix::identity(d, d));
        for a in 0..phi.len() - 1 {
            let kappa = (phi[a + 1] - phi[a]) / self.h;
            let psi = self.maps(kappa).psi.clone();
            let next = &out[a] * psi;
            out.push(next);
        }
        out
    }
}

/// Classical RK4 for the same row IVP with φ' and f interpolated linearly
/// in z; an independent check of [`Propagator::solve`].
pub fn rk4_rows(
    m: &DMatrix<f64>,
    dphi: impl Fn(f64) -> f64,
    f: impl Fn(f64) -> DMatrix<f64>,
    v0: &DMatrix<f64>,
    h: f64,
    steps: usize,
    substeps: usize,
) -> Vec<DMatrix<f64>> {
    let rhs = |z: f64, v: &DMatrix<f64>| v * m * dphi(z) + f(z);
    let dt = h / substeps as f64;
    let mut v = v0.clone();
    let mut out = vec![v.clone()];
    for a in 0..steps {
        for s in 0..substeps {
            let z = a as f64 * h + s as f64 * dt;
            let k1 = rhs(z, &v);
            let k2 = rhs(z + 0.5 * dt, &(&v + &k1 * (0.5 * dt)));
            let k3 = rhs(z + 0.5 * dt, &(&v + &k2 * (0.5 * dt)));
            let k4 = rhs(z + dt, &(&v + &k3 * dt));
            v += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        out.push(v.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_exponential_forcing() {
        // v' = -v + 1 on constant φ' = 1: v = 1 - e^{-z} from v(0) = 0
        let m = DMatrix::from_element(1, 1, -1.0);
        let n = 20;
        let h = 1.0 / n as f64;
        let phi: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
        let f = vec![DMatrix::from_element(1, 1, 1.0); n + 1];
        let v = Propagator::new(&m, h).solve(&phi, &DMatrix::zeros(1, 1), &f);
        for (k, vk) in v.iter().enumerate() {
            let z = k as f64 * h;
            assert!((vk[(0, 0)] - (1.0 - (-z).exp())).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_forcing_matches_rk4() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.5]);
        let n = 10;
        let h = 1.0 / n as f64;
        let phi: Vec<f64> = (0..=n).map(|k| -0.5 * k as f64 * h).collect();
        let fz = |z: f64| DMatrix::from_row_slice(1, 2, &[z, 1.0 - 2.0 * z]);
        let f: Vec<_> = (0..=n).map(|k| fz(k as f64 * h)).collect();
        let v0 = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let a = Propagator::new(&m, h).solve(&phi, &v0, &f);
        let b = rk4_rows(&m, |_| -0.5, fz, &v0, h, n, 50);
        for k in 0..=n {
            assert!((&a[k] - &b[k]).amax() < 1e-12, "{k}");
        }
    }
}
