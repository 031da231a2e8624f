//! Symmetric eigendecomposition (cyclic Jacobi) and pseudo-inverse.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub struct SymmetricEigen {
    /// Eigenvalues, unsorted.
    pub values: Vec<f64>,
    /// Columns are eigenvectors, aligned with `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Dim(format!("eigen needs square matrix, got {}x{}", n, a.cols())));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale = a.max_abs().max(1e-300);
    let tol = 1e-14 * scale;
    let max_sweeps = 64;

    for _ in 0..max_sweeps {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m.at(p, q).abs());
            }
        }
        if off <= tol {
            return Ok(SymmetricEigen {
                values: (0..n).map(|i| m.at(i, i)).collect(),
                vectors: v,
            });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    Err(Error::LinAlg("jacobi eigendecomposition did not converge".into()))
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via eigendecomposition.
/// Eigenvalues below `rel_tol * max|lambda|` are treated as zero rank.
pub fn pinv_symmetric(a: &Matrix, rel_tol: f64) -> Result<Matrix> {
    let eig = symmetric_eigen(a)?;
    let n = a.rows();
    let lmax = eig.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = rel_tol * lmax.max(1e-300);
    // pinv = V diag(1/lambda) V^T over the retained spectrum
    let mut scaled = Matrix::zeros(n, n);
    for j in 0..n {
        let lam = eig.values[j];
        let inv = if lam.abs() > cut { 1.0 / lam } else { 0.0 };
        for i in 0..n {
            scaled.set(i, j, eig.vectors.at(i, j) * inv);
        }
    }
    Ok(scaled.matmul(&eig.vectors.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    fn random_symmetric(n: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        let a = rng.normal_matrix(n, n, 0.0, 1.0);
        a.add(&a.transpose()).scale(0.5)
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let a = random_symmetric(8, 3);
        let eig = symmetric_eigen(&a).unwrap();
        let mut lam = Matrix::zeros(8, 8);
        for i in 0..8 {
            lam.set(i, i, eig.values[i]);
        }
        let rec = eig.vectors.matmul(&lam).matmul(&eig.vectors.transpose());
        assert!(rec.sub(&a).max_abs() < 1e-9, "reconstruction error {}", rec.sub(&a).max_abs());
    }

    #[test]
    fn eigen_of_diagonal_is_diagonal() {
        let mut d = Matrix::zeros(3, 3);
        d.set(0, 0, 2.0);
        d.set(1, 1, -1.0);
        d.set(2, 2, 0.5);
        let eig = symmetric_eigen(&d).unwrap();
        let mut vals = eig.values.clone();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] + 1.0).abs() < 1e-12);
        assert!((vals[1] - 0.5).abs() < 1e-12);
        assert!((vals[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_satisfies_penrose_identity() {
        let a = random_symmetric(6, 9);
        let p = pinv_symmetric(&a, 1e-12).unwrap();
        let apa = a.matmul(&p).matmul(&a);
        assert!(apa.sub(&a).max_abs() < 1e-8);
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        // Diagonally dominant, hence invertible.
        let mut a = random_symmetric(5, 21);
        for i in 0..5 {
            a.set(i, i, a.at(i, i) + 10.0);
        }
        let p = pinv_symmetric(&a, 1e-12).unwrap();
        let id = a.matmul(&p);
        assert!(id.sub(&Matrix::identity(5)).max_abs() < 1e-9);
    }
}
