//! Symmetric positive-definite solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry count as zero.
const PIVOT_RTOL: f64 = 1e-13;

/// Systems at most this large are factored densely; larger ones use CG.
pub const DIRECT_LIMIT: usize = 5000;

/// Cholesky factorization that rejects numerically rank-deficient matrices.
pub fn cholesky(a: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let max_diag = a.diagonal().iter().cloned().fold(0.0, f64::max);
    if max_diag <= 0.0 || !max_diag.is_finite() {
        return Err(Error::Singular { row: 0, pivot: max_diag });
    }
    let chol = Cholesky::new(a).ok_or(Error::Singular { row: 0, pivot: 0.0 })?;
    let l = chol.l_dirty();
    for i in 0..l.nrows() {
        let pivot = l[(i, i)] * l[(i, i)];
        if !(pivot > PIVOT_RTOL * max_diag) {
            return Err(Error::Singular { row: i, pivot });
        }
    }
    Ok(chol)
}

pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky(a)?.solve(b))
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Diagonally preconditioned conjugate gradients for `A x = b`.
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    diag: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgResult> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(CgResult {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv: Vec<f64> = diag.iter().map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Singular { row: it, pivot: pap });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r) / bnorm;
        if res <= tol {
            return Ok(CgResult {
                x,
                iterations: it + 1,
                relative_residual: res,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let relative_residual = norm(&r) / bnorm;
    Err(Error::Degenerate(format!(
        "conjugate gradients did not converge in {max_iter} iterations (residual {relative_residual:.3e})"
    )))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn cholesky_solves() {
        let a = spd(12, 1);
        let b = DVector::from_fn(12, |i, _| i as f64);
        let x = solve_spd(a.clone(), &b).unwrap();
        assert!((&a * x - b).norm() < 1e-10);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
        let a = &m * m.transpose();
        assert!(matches!(cholesky(a), Err(Error::Singular { .. })));
    }

    #[test]
    fn cg_matches_direct() {
        let a = spd(30, 3);
        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let diag: Vec<f64> = a.diagonal().iter().cloned().collect();
        let r = conjugate_gradient(
            |v| (&a * DVector::from_column_slice(v)).as_slice().to_vec(),
            &b,
            &diag,
            1e-12,
            1000,
        )
        .unwrap();
        let x = solve_spd(a.clone(), &DVector::from_vec(b)).unwrap();
        for (p, q) in r.x.iter().zip(x.iter()) {
            assert!((p - q).abs() < 1e-8);
        }
    }
}
