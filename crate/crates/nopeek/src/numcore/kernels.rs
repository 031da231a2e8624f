//! Matrix-level kernels shared by the tape ops and the plain estimators.

use super::Matrix;

/// Squared Euclidean distances between rows, via the Gram expansion
/// r_i - 2 <x_i, x_j> + r_j, clamped below at zero against cancellation.
pub fn squared_dist(x: &Matrix) -> Matrix {
    let n = x.rows();
    let gram = x.matmul(&x.transpose());
    let r: Vec<f64> = (0..n).map(|i| gram.at(i, i)).collect();
    Matrix::from_fn(n, n, |i, j| (r[i] - 2.0 * gram.at(i, j) + r[j]).max(0.0))
}

/// Euclidean distances between rows; each squared distance is clamped below
/// at `eps` before the square root, so identical rows map to sqrt(eps).
pub fn pairwise_dist(x: &Matrix, eps: f64) -> Matrix {
    let n = x.rows();
    let gram = x.matmul(&x.transpose());
    let r: Vec<f64> = (0..n).map(|i| gram.at(i, i)).collect();
    Matrix::from_fn(n, n, |i, j| (r[i] - 2.0 * gram.at(i, j) + r[j]).max(eps).sqrt())
}

/// Mask of entries whose squared distance exceeds `eps` (clamp inactive).
pub fn pairwise_clamp_mask(x: &Matrix, eps: f64) -> Matrix {
    let n = x.rows();
    let gram = x.matmul(&x.transpose());
    let r: Vec<f64> = (0..n).map(|i| gram.at(i, i)).collect();
    Matrix::from_fn(n, n, |i, j| {
        if r[i] - 2.0 * gram.at(i, j) + r[j] > eps {
            1.0
        } else {
            0.0
        }
    })
}

/// A_ij = D_ij - rowmean_i - colmean_j + grandmean. Row and column sums of
/// the result vanish up to rounding.
pub fn double_center(d: &Matrix) -> Matrix {
    let n = d.rows();
    debug_assert_eq!(n, d.cols());
    let nf = n as f64;
    let row_means: Vec<f64> = d.row_sums().iter().map(|s| s / nf).collect();
    let col_means: Vec<f64> = d.col_sums().iter().map(|s| s / nf).collect();
    let grand = d.sum() / (nf * nf);
    Matrix::from_fn(n, n, |i, j| d.at(i, j) - row_means[i] - col_means[j] + grand)
}

/// Row-wise softmax with max-shift for stability.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let (n, k) = logits.shape();
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..k {
            let e = (row[j] - m).exp();
            out.set(i, j, e);
            denom += e;
        }
        for j in 0..k {
            out.set(i, j, out.at(i, j) / denom);
        }
    }
    out
}

/// Mean softmax cross-entropy against one-hot targets, with the stable
/// log-sum-exp form. Returns (loss, softmax probabilities).
pub fn softmax_cce(logits: &Matrix, y: &Matrix) -> (f64, Matrix) {
    let (n, k) = logits.shape();
    debug_assert_eq!(y.shape(), (n, k));
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..k {
            if y.at(i, j) != 0.0 {
                loss -= y.at(i, j) * (row[j] - lse);
            }
        }
    }
    (loss / n as f64, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;

    #[test]
    fn double_center_zeroes_margins() {
        let mut rng = Rng::new(2);
        let d = rng.uniform_matrix(6, 6, 0.0, 3.0);
        let a = double_center(&d);
        for s in a.row_sums() {
            assert!(s.abs() < 1e-10);
        }
        for s in a.col_sums() {
            assert!(s.abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(4);
        let l = rng.normal_matrix(5, 3, 0.0, 4.0);
        let p = softmax_rows(&l);
        for s in p.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = Matrix::zeros(4, 3);
        let mut y = Matrix::zeros(4, 3);
        for i in 0..4 {
            y.set(i, i % 3, 1.0);
        }
        let (loss, _) = softmax_cce(&l, &y);
        assert!((loss - 3.0_f64.ln()).abs() < 1e-12);
    }
}
