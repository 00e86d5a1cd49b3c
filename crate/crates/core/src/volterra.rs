//! Volterra integral equations of the second kind,
//!
//! ```text
//! f(z) + ∫₀ᶻ k(z, ζ) f(ζ) dζ = g(z),
//! ```
//!
//! discretized by the trapezoid rule on a uniform grid. The kernel is a
//! d×d matrix multiplying the d×c unknown from the left; d = c = 1 is the
//! scalar case.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VolterraError {
    #[error("singular discretization at node {node}: pivot 1 + (h/2) k(z, z) vanishes")]
    Singular { node: usize },
    #[error("successive approximation did not converge in {iters} iterations (last change {change:e})")]
    NoConvergence { iters: usize, change: f64 },
}

const PIVOT_TOL: f64 = 1e-10;

/// A discretized problem. `kernel(j, l, out)` writes k(z_j, z_l) row-major
/// for l ≤ j; `rhs(j, out)` writes g(z_j) row-major (d×c).
pub struct VolterraProblem<K, G>
where
    K: Fn(usize, usize, &mut [f64]),
    G: Fn(usize, &mut [f64]),
{
    pub h: f64,
    pub len: usize,
    pub dim: usize,
    pub cols: usize,
    pub kernel: K,
    pub rhs: G,
}

/// Node values of the solution, each a row-major d×c block.
#[derive(Debug, Clone, PartialEq)]
pub struct VolterraSolution {
    pub dim: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl VolterraSolution {
    pub fn node(&self, j: usize) -> &[f64] {
        let s = self.dim * self.cols;
        &self.values[j * s..(j + 1) * s]
    }

    pub fn scalar(&self) -> Vec<f64> {
        assert_eq!(self.dim * self.cols, 1);
        self.values.clone()
    }

    pub fn matrix(&self, j: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.cols, self.node(j))
    }
}

/// Accumulate h·Σ_l w_l k(j,l) f_l over l = 0..upto (exclusive), with the
/// trapezoid half weight on l = 0.
fn history<K: Fn(usize, usize, &mut [f64])>(
    kernel: &K,
    j: usize,
    upto: usize,
    h: f64,
    d: usize,
    c: usize,
    f: &[f64],
    kbuf: &mut [f64],
    acc: &mut [f64],
) {
    acc.iter_mut().for_each(|v| *v = 0.0);
    let s = d * c;
    for l in 0..upto {
        kernel(j, l, kbuf);
        let w = if l == 0 { 0.5 * h } else { h };
        let fl = &f[l * s..(l + 1) * s];
        for r in 0..d {
            for q in 0..d {
                let kv = w * kbuf[r * d + q];
                if kv == 0.0 {
                    continue;
                }
                for col in 0..c {
                    acc[r * c + col] += kv * fl[q * c + col];
                }
            }
        }
    }
}

/// Nyström trapezoid discretization solved by forward substitution.
pub fn solve_volterra2<K, G>(prob: &VolterraProblem<K, G>) -> Result<VolterraSolution, VolterraError>
where
    K: Fn(usize, usize, &mut [f64]),
    G: Fn(usize, &mut [f64]),
{
    let (d, c, h) = (prob.dim, prob.cols, prob.h);
    let s = d * c;
    let mut f = vec![0.0; prob.len * s];
    let mut kbuf = vec![0.0; d * d];
    let mut acc = vec![0.0; s];
    let mut g = vec![0.0; s];
    for j in 0..prob.len {
        (prob.rhs)(j, &mut g);
        if j == 0 {
            f[..s].copy_from_slice(&g);
            continue;
        }
        history(&prob.kernel, j, j, h, d, c, &f, &mut kbuf, &mut acc);
        (prob.kernel)(j, j, &mut kbuf);
        let out = &mut f[j * s..(j + 1) * s];
        if d == 1 {
            let piv = 1.0 + 0.5 * h * kbuf[0];
            if piv.abs() < PIVOT_TOL {
                return Err(VolterraError::Singular { node: j });
            }
            for col in 0..c {
                out[col] = (g[col] - acc[col]) / piv;
            }
        } else {
            let mut a = DMatrix::from_row_slice(d, d, &kbuf) * (0.5 * h);
            for r in 0..d {
                a[(r, r)] += 1.0;
            }
            let smin = a.clone().svd(false, false).singular_values.min();
            if smin < PIVOT_TOL {
                return Err(VolterraError::Singular { node: j });
            }
            let rhs = DMatrix::from_fn(d, c, |r, col| g[r * c + col] - acc[r * c + col]);
            let x = a
                .lu()
                .solve(&rhs)
                .ok_or(VolterraError::Singular { node: j })?;
            for r in 0..d {
                for col in 0..c {
                    out[r * c + col] = x[(r, col)];
                }
            }
        }
    }
    Ok(VolterraSolution {
        dim: d,
        cols: c,
        values: f,
    })
}

/// Successive approximation f_{m+1} = g − ∫ k f_m on the same trapezoid
/// discretization, starting from f_0 = g.
pub fn picard_iterate<K, G>(
    prob: &VolterraProblem<K, G>,
    max_iters: usize,
    tol: f64,
) -> Result<(VolterraSolution, usize), VolterraError>
where
    K: Fn(usize, usize, &mut [f64]),
    G: Fn(usize, &mut [f64]),
{
    let (d, c, h) = (prob.dim, prob.cols, prob.h);
    let s = d * c;
    let mut g = vec![0.0; prob.len * s];
    for j in 0..prob.len {
        (prob.rhs)(j, &mut g[j * s..(j + 1) * s]);
    }
    let mut f = g.clone();
    let mut next = vec![0.0; f.len()];
    let mut kbuf = vec![0.0; d * d];
    let mut acc = vec![0.0; s];
    let mut change = f64::INFINITY;
    for it in 1..=max_iters {
        for j in 0..prob.len {
            let dst = &mut next[j * s..(j + 1) * s];
            dst.copy_from_slice(&g[j * s..(j + 1) * s]);
            if j == 0 {
                continue;
            }
            history(&prob.kernel, j, j, h, d, c, &f, &mut kbuf, &mut acc);
            for v in 0..s {
                dst[v] -= acc[v];
            }
            (prob.kernel)(j, j, &mut kbuf);
            let fj = &f[j * s..(j + 1) * s];
            for r in 0..d {
                for q in 0..d {
                    let kv = 0.5 * h * kbuf[r * d + q];
                    for col in 0..c {
                        dst[r * c + col] -= kv * fj[q * c + col];
                    }
                }
            }
        }
        change = f
            .iter()
            .zip(&next)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut f, &mut next);
        if change < tol {
            return Ok((
                VolterraSolution {
                    dim: d,
                    cols: c,
                    values: f,
                },
                it,
            ));
        }
    }
    Err(VolterraError::NoConvergence {
        iters: max_iters,
        change,
    })
}

/// Scalar convenience wrapper around [`solve_volterra2`].
pub fn solve_scalar(
    h: f64,
    kernel: impl Fn(usize, usize) -> f64,
    g: &[f64],
) -> Result<Vec<f64>, VolterraError> {
    let prob = VolterraProblem {
        h,
        len: g.len(),
        dim: 1,
        cols: 1,
        kernel: |j: usize, l: usize, out: &mut [f64]| out[0] = kernel(j, l),
        rhs: |j: usize, out: &mut [f64]| out[0] = g[j],
    };
    Ok(solve_volterra2(&prob)?.values)
}

/// Largest deviation of the discretized equation evaluated on `f`.
pub fn scalar_residual(h: f64, kernel: impl Fn(usize, usize) -> f64, g: &[f64], f: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..g.len() {
        let mut integral = 0.0;
        for l in 0..=j {
            let w = if j == 0 {
                0.0
            } else if l == 0 || l == j {
                0.5 * h
            } else {
                h
            };
            integral += w * kernel(j, l) * f[l];
        }
        worst = worst.max((f[j] + integral - g[j]).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> (f64, Vec<f64>) {
        let h = 1.0 / n as f64;
        (h, (0..=n).map(|k| k as f64 * h).collect())
    }

    #[test]
    fn zero_kernel_returns_rhs() {
        let (h, z) = grid(50);
        let g: Vec<f64> = z.iter().map(|x| x.sin() + 2.0).collect();
        assert_eq!(solve_scalar(h, |_, _| 0.0, &g).unwrap(), g);
    }

    #[test]
    fn constant_kernel_gives_exponential() {
        let (h, z) = grid(100);
        let f = solve_scalar(h, |_, _| 1.0, &vec![1.0; z.len()]).unwrap();
        let err = z.iter().zip(&f).map(|(x, v)| (v - (-x).exp()).abs()).fold(0.0, f64::max);
        assert!(err <= 5.0 * h * h, "{err}");
    }

    #[test]
    fn singular_pivot_is_reported() {
        let (h, z) = grid(20);
        let k = -2.0 / h;
        let r = solve_scalar(h, |_, _| k, &vec![1.0; z.len()]);
        assert_eq!(r, Err(VolterraError::Singular { node: 1 }));
    }

    #[test]
    fn matrix_diagonal_kernel_decouples() {
        let (h, z) = grid(40);
        let prob = VolterraProblem {
            h,
            len: z.len(),
            dim: 2,
            cols: 1,
            kernel: |j: usize, l: usize, out: &mut [f64]| {
                out.copy_from_slice(&[1.0, 0.0, 0.0, z[j] - z[l]]);
            },
            rhs: |j: usize, out: &mut [f64]| {
                out[0] = 1.0;
                out[1] = z[j];
            },
        };
        let sol = solve_volterra2(&prob).unwrap();
        let a = solve_scalar(h, |_, _| 1.0, &vec![1.0; z.len()]).unwrap();
        let b = solve_scalar(h, |j, l| z[j] - z[l], &z).unwrap();
        for j in 0..z.len() {
            assert_eq!(sol.node(j)[0], a[j]);
            assert!((sol.node(j)[1] - b[j]).abs() < 1e-15);
        }
        let (pic, _) = picard_iterate(&prob, 200, 1e-13).unwrap();
        for j in 0..z.len() {
            assert!((pic.node(j)[0] - a[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn picard_on_zero_kernel_stops_immediately() {
        let (h, z) = grid(20);
        let prob = VolterraProblem {
            h,
            len: z.len(),
            dim: 1,
            cols: 1,
            kernel: |_: usize, _: usize, out: &mut [f64]| out[0] = 0.0,
            rhs: |j: usize, out: &mut [f64]| out[0] = z[j],
        };
        let (sol, iters) = picard_iterate(&prob, 10, 1e-12).unwrap();
        assert_eq!(iters, 1);
        assert_eq!(sol.values, z);
    }
}
