//! Pole placement by eigenstructure assignment: solve
//! F X − X Λ_d = B G for a random parameter matrix G and set K = G X⁻¹,
//! so that (F − BK)X = XΛ_d.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{self, cond};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlacementError {
    #[error("pole set has {got} entries, expected {want}")]
    Count { got: usize, want: usize },
    #[error("pole set is not closed under conjugation")]
    NotConjugate,
    #[error("uncontrollable mode {0} is not among the requested poles")]
    Unattainable(Complex64),
    #[error("assignment system stays ill-conditioned after {0} draws")]
    IllConditioned(usize),
}

pub const MAX_DRAWS: usize = 5;
const COND_LIMIT: f64 = 1e8;

/// Real block-diagonal matrix with the given eigenvalues.
pub fn real_block_diag(poles: &[Complex64]) -> Result<DMatrix<f64>, PlacementError> {
    let n = poles.len();
    let mut d = DMatrix::zeros(n, n);
    let mut used = vec![false; n];
    let mut k = 0;
    let scale = poles.iter().map(|p| p.norm()).fold(1.0, f64::max);
    for (a, pa) in poles.iter().enumerate() {
        if used[a] {
            continue;
        }
        used[a] = true;
        if pa.im.abs() <= 1e-12 * scale {
            d[(k, k)] = pa.re;
            k += 1;
            continue;
        }
        let b = (0..n)
            .find(|&b| !used[b] && (poles[b] - pa.conj()).norm() <= 1e-9 * scale)
            .ok_or(PlacementError::NotConjugate)?;
        used[b] = true;
        let (re, im) = (pa.re, pa.im.abs());
        d[(k, k)] = re;
        d[(k, k + 1)] = im;
        d[(k + 1, k)] = -im;
        d[(k + 1, k + 1)] = re;
        k += 2;
    }
    Ok(d)
}

/// Solve F X − X D = C by vectorization.
pub fn sylvester(f: &DMatrix<f64>, d: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (n, k) = (f.nrows(), d.nrows());
    let mut big = DMatrix::zeros(n * k, n * k);
    // column-major vec: vec(FX) = (I ⊗ F) vec X, vec(XD) = (Dᵀ ⊗ I) vec X
    for col in 0..k {
        for r in 0..n {
            for q in 0..n {
                big[(col * n + r, col * n + q)] += f[(r, q)];
            }
        }
        for col2 in 0..k {
            let v = d[(col2, col)];
            if v != 0.0 {
                for r in 0..n {
                    big[(col * n + r, col2 * n + r)] -= v;
                }
            }
        }
    }
    if linalg::singular_values(&big).iter().cloned().fold(f64::INFINITY, f64::min)
        < 1e-12 * linalg::max_abs(&big).max(1.0)
    {
        return None;
    }
    let rhs = DMatrix::from_column_slice(n * k, 1, c.as_slice());
    let x = big.lu().solve(&rhs)?;
    Some(DMatrix::from_column_slice(n, k, x.as_slice()))
}

/// Orthonormal basis of the controllable subspace of (F, B).
fn controllable_basis(f: &DMatrix<f64>, b: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let n = f.nrows();
    let p = b.ncols();
    let mut ctrb = DMatrix::zeros(n, n * p);
    let mut blk = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * p), (n, p)).copy_from(&blk);
        blk = f * blk;
    }
    let scale = linalg::max_abs(&ctrb).max(1e-300);
    let svd = (ctrb / scale).svd(true, false);
    let u = svd.u.expect("requested u");
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * smax)
        .count();
    // complete to an orthonormal basis of R^n
    let mut full = DMatrix::zeros(n, n);
    let cols = u.ncols().min(n);
    full.view_mut((0, 0), (n, cols)).copy_from(&u.view((0, 0), (n, cols)));
    if cols < n {
        let qr = full.clone().qr();
        full = qr.q();
    }
    (full, rank)
}

/// State feedback K with eig(F − BK) equal to `poles`.
pub fn place_poles(
    f: &DMatrix<f64>,
    b: &DMatrix<f64>,
    poles: &[Complex64],
    seed: u64,
) -> Result<DMatrix<f64>, PlacementError> {
    let n = f.nrows();
    let p = b.ncols();
    if poles.len() != n {
        return Err(PlacementError::Count {
            got: poles.len(),
            want: n,
        });
    }
    real_block_diag(poles)?;
    let (t, rank) = controllable_basis(f, b);
    let mut remaining: Vec<Complex64> = poles.to_vec();
    if rank < n {
        let fbar = t.transpose() * f * &t;
        let f22 = fbar.view((rank, rank), (n - rank, n - rank)).into_owned();
        for mu in linalg::eigenvalues(&f22) {
            let tol = 1e-6 * (1.0 + mu.norm());
            let k = remaining
                .iter()
                .position(|z| (z - mu).norm() <= tol)
                .ok_or(PlacementError::Unattainable(mu))?;
            remaining.remove(k);
        }
    }
    if rank == 0 {
        return Ok(DMatrix::zeros(p, n));
    }
    let fbar = t.transpose() * f * &t;
    let bbar = t.transpose() * b;
    let f11 = fbar.view((0, 0), (rank, rank)).into_owned();
    let b1 = bbar.view((0, 0), (rank, p)).into_owned();
    let d = real_block_diag(&remaining)?;
    // all draws are evaluated; the best-conditioned eigenvector matrix wins
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..MAX_DRAWS {
        let g = DMatrix::from_fn(p, rank, |_, _| rng.random_range(-1.0..1.0));
        let Some(x) = sylvester(&f11, &d, &(&b1 * &g)) else {
            continue;
        };
        let c = cond(&x);
        if c > COND_LIMIT || best.as_ref().is_some_and(|(bc, _)| *bc <= c) {
            continue;
        }
        let Some(xinv) = x.try_inverse() else {
            continue;
        };
        best = Some((c, g * xinv));
    }
    if let Some((_, k1)) = best {
        let mut kbar = DMatrix::zeros(p, n);
        kbar.view_mut((0, 0), (p, rank)).copy_from(&k1);
        return Ok(kbar * t.transpose());
    }
    Err(PlacementError::IllConditioned(MAX_DRAWS))
}
