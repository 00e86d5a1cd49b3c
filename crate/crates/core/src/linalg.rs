//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Matrix exponential (Padé scaling-and-squaring, as implemented by nalgebra).
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|&v| v == 0.0) {
        return DMatrix::identity(m.nrows(), m.ncols());
    }
    m.exp()
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

pub fn complex_singular_values(m: &CMatrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    m.clone().svd(false, false).singular_values.iter().copied().collect()
}

/// 2-norm condition number; infinite for singular matrices.
pub fn cond(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn rank_complex(m: &CMatrix, rel_tol: f64) -> usize {
    let s = complex_singular_values(m);
    let max = s.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rel_tol * max).count()
}

/// Eigenvalues grouped into clusters of numerically equal values.
pub fn eigenvalue_clusters(m: &DMatrix<f64>) -> Vec<(Complex64, usize)> {
    let scale = 1.0 + max_abs(m);
    let mut out: Vec<(Complex64, usize)> = Vec::new();
    for mu in eigenvalues(m) {
        match out.iter_mut().find(|(c, _)| (*c - mu).norm() <= 1e-6 * scale) {
            Some(entry) => entry.1 += 1,
            None => out.push((mu, 1)),
        }
    }
    out
}

/// Right null space of a complex matrix, as orthonormal columns.
pub fn null_space(m: &CMatrix, rel_tol: f64) -> Vec<nalgebra::DVector<Complex64>> {
    let cols = m.ncols();
    // pad to square so the SVD returns a full set of right singular vectors
    let rows = m.nrows().max(cols);
    let mut sq = CMatrix::zeros(rows, cols);
    sq.view_mut((0, 0), (m.nrows(), cols)).copy_from(m);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("requested v_t");
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = rel_tol * max.max(1.0);
    (0..cols)
        .filter(|&k| svd.singular_values[k] <= tol)
        .map(|k| vt.row(k).transpose().map(|c| c.conj()))
        .collect()
}

/// Eigenvalues of F (with Re ≥ 0) at which rank [μI − F, B] drops.
pub fn unstabilizable_modes(f: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Complex64> {
    uncontrollable_modes(f, b)
        .into_iter()
        .filter(|mu| mu.re >= 0.0)
        .collect()
}

/// Eigenvalues of F failing the Hautus test for (F, B).
pub fn uncontrollable_modes(f: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<Complex64> {
    let n = f.nrows();
    let mut out = Vec::new();
    for (mu, _) in eigenvalue_clusters(f) {
        let mut h = CMatrix::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { mu } else { Complex64::new(0.0, 0.0) };
                h[(i, j)] = d - f[(i, j)];
            }
            for j in 0..b.ncols() {
                h[(i, n + j)] = Complex64::new(b[(i, j)], 0.0);
            }
        }
        if rank_complex(&h, 1e-10) < n {
            out.push(mu);
        }
    }
    out
}

/// Distance between two eigenvalue multisets (greedy matching).
pub fn spectrum_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst = 0.0_f64;
    for x in a {
        let (k, d) = b
            .iter()
            .enumerate()
            .filter(|(k, _)| !used[*k])
            .map(|(k, y)| (k, (x - y).norm()))
            .fold((usize::MAX, f64::INFINITY), |acc, v| if v.1 < acc.1 { v } else { acc });
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_scalar_and_zero() {
        let m = DMatrix::from_element(1, 1, 0.7);
        assert!((expm(&m)[(0, 0)] - 0.7f64.exp()).abs() < 1e-14);
        assert_eq!(expm(&DMatrix::zeros(3, 3)), DMatrix::identity(3, 3));
    }

    #[test]
    fn expm_rotation() {
        let t = 1.3;
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -t, t, 0.0]);
        let e = expm(&m);
        let want = DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        assert!((e - want).amax() < 1e-13);
    }

    #[test]
    fn hautus() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(uncontrollable_modes(&f, &b).len(), 1);
        let f = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(uncontrollable_modes(&f, &b).is_empty());
    }

    #[test]
    fn null_space_of_rank_one() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let ns = null_space(&to_complex(&m), 1e-10);
        assert_eq!(ns.len(), 1);
        let r = to_complex(&m) * &ns[0];
        assert!(r.norm() < 1e-12);
    }
}
