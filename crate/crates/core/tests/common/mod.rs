//! Reference implementations used as test oracles. Deliberately naive and
//! independent of the library's own factorizations.

#![allow(dead_code, clippy::needless_range_loop)]

use mondeq::LinearOperator;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dense matrix of an operator, one basis vector at a time.
pub fn dense_of(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (n, m) = (op.dim_out(), op.dim_in());
    let mut out = DMatrix::zeros(n, m);
    let mut e = vec![0.0; m];
    let mut y = vec![0.0; n];
    for j in 0..m {
        e[j] = 1.0;
        op.apply(&e, &mut y);
        for i in 0..n {
            out[(i, j)] = y[i];
        }
        e[j] = 0.0;
    }
    out
}

/// Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = a.nrows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[(i, j)]).chain(std::iter::once(b[i])).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        assert!(p.abs() > 1e-300, "singular oracle system");
        for r in col + 1..n {
            let f = m[r][col] / p;
            if f != 0.0 {
                for c in col..=n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][n] - s) / m[r][r];
    }
    x
}

/// True when the symmetric matrix `s − shift·I` is positive definite
/// (Cholesky succeeds).
pub fn cholesky_ok(s: &DMatrix<f64>, shift: f64) -> bool {
    let n = s.nrows();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s[(i, j)] - if i == j { shift } else { 0.0 };
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return false;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    true
}

/// `sym(I − W) ⪰ (m − tol) I`, checked by Cholesky.
pub fn monotone_by_cholesky(w: &DMatrix<f64>, m: f64, tol: f64) -> bool {
    let n = w.nrows();
    let g = DMatrix::<f64>::identity(n, n) - w;
    let sym = (&g + g.transpose()) * 0.5;
    cholesky_ok(&sym, m - tol)
}

/// Unnormalized 2-D DFT matrix on row-major `s × s` planes.
pub fn dft2(s: usize) -> DMatrix<Complex64> {
    let n = s * s;
    DMatrix::from_fn(n, n, |k, x| {
        let (u, v) = (k / s, k % s);
        let (i, j) = (x / s, x % s);
        let phase = -2.0 * std::f64::consts::PI * ((u * i + v * j) as f64) / s as f64;
        Complex64::from_polar(1.0, phase)
    })
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / n.max(1e-300)
}

pub fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `I + α(I − W)`
pub fn resolvent_system(w: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let n = w.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    &id + (&id - w) * alpha
}
