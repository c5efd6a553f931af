//! Dense helpers shared by the operator modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

/// Scatter `sub` into a zero matrix of the given shape.
pub fn embed(sub: &DMatrix<f64>, rows: &[usize], cols: &[usize], nr: usize, nc: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nr, nc);
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in cols.iter().enumerate() {
            m[(i, j)] = sub[(a, b)];
        }
    }
    m
}

pub fn embed_vec(sub: &DVector<f64>, idx: &[usize], n: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    for (a, &i) in idx.iter().enumerate() {
        v[i] = sub[a];
    }
    v
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    match m.clone().cholesky() {
        Some(c) => Ok(c.inverse()),
        None => Err(Error::Singular(format!(
            "matrix of size {} is not positive definite (min eigenvalue {:.3e})",
            m.nrows(),
            min_eigenvalue(m)
        ))),
    }
}

pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    m.clone().try_inverse().ok_or_else(|| Error::Singular(format!("size {} matrix", m.nrows())))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let c = m.clone().cholesky().ok_or_else(|| Error::Singular("logdet of non-SPD matrix".into()))?;
    Ok(2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>())
}

/// Precision of the marginal on `keep` after integrating out `drop`.
pub fn schur_marginal(p: &DMatrix<f64>, keep: &[usize], drop: &[usize]) -> Result<DMatrix<f64>> {
    let pkk = submatrix(p, keep, keep);
    if drop.is_empty() {
        return Ok(pkk);
    }
    let pkd = submatrix(p, keep, drop);
    let pdd = submatrix(p, drop, drop);
    let inv = spd_inverse(&pdd)?;
    Ok(symmetrize(&(pkk - &pkd * inv * pkd.transpose())))
}

/// `f(A)` for symmetric `A` through the eigendecomposition.
pub fn sym_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    if m.nrows() == 0 {
        return DMatrix::zeros(0, 0);
    }
    let e = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, &x| a.max(x.abs()))
}

/// Induced infinity norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Spectral norm.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.iter().cloned().fold(0.0, f64::max)
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

/// Gauss quadrature from a symmetric tridiagonal Jacobi matrix (Golub-Welsch).
fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut j = DMatrix::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = diag[i];
        if i + 1 < n {
            j[(i, i + 1)] = off[i];
            j[(i + 1, i)] = off[i];
        }
    }
    let e = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (e.eigenvalues[i], mu0 * e.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let off: Vec<f64> = (1..n).map(|k| k as f64 / ((4 * k * k - 1) as f64).sqrt()).collect();
    golub_welsch(&vec![0.0; n], &off, 2.0)
}

/// Gauss-Hermite rule for the standard normal density (probabilists' weight).
pub fn gauss_hermite_normal(n: usize) -> (Vec<f64>, Vec<f64>) {
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&vec![0.0; n], &off, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(10);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-13);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
    }

    #[test]
    fn hermite_moments() {
        let (x, w) = gauss_hermite_normal(8);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        let m4: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m2 - 1.0).abs() < 1e-12 && (m4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn schur_matches_inverse_block() {
        let p = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let m = schur_marginal(&p, &[0, 2], &[1]).unwrap();
        let cov = spd_inverse(&p).unwrap();
        let sub = spd_inverse(&submatrix(&cov, &[0, 2], &[0, 2])).unwrap();
        assert!(max_abs(&(m - sub)) < 1e-13);
    }

    #[test]
    fn sqrt_squares_back() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = sym_function(&p, f64::sqrt);
        assert!(max_abs(&(&r * &r - p)) < 1e-14);
    }
}
