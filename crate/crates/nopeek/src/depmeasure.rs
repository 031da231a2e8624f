//! Sample distance covariance / correlation and its gradients.
//!
//! The estimator double-centers pairwise Euclidean distance matrices and
//! normalizes the mean elementwise product:
//!
//!   dCov  = sqrt(sum(A .* B) / n^2)
//!   dVarX = sqrt(sum(A .* A) / n^2),  dVarZ likewise
//!   dCor  = dCov / sqrt(dVarX * dVarZ)
//!
//! Squared distances are clamped below at `DIST_EPS` before the square root,
//! so zero-distance pairs contribute sqrt(eps); the centered inner sums are
//! clamped at zero before their square roots. The non-squared dCor is what
//! the training loss consumes.

use crate::error::{Error, Result};
use crate::numcore::{kernels, Matrix, Tape, Var};

/// Lower clamp applied to squared pairwise distances.
pub const DIST_EPS: f64 = 1e-7;

/// Product of the two distance variances below this is treated as a
/// degenerate (constant) sample.
pub const DEGENERATE_VARIANCE: f64 = 1e-12;

/// Double-centered pairwise-distance matrix: symmetric with vanishing row
/// and column sums.
#[derive(Debug, Clone)]
pub struct CenteredDistanceMatrix {
    pub n: usize,
    pub a: Matrix,
}

impl CenteredDistanceMatrix {
    /// |row sum| and |col sum| must stay below 1e-8 * n.
    pub fn check_margins(&self) -> bool {
        let tol = 1e-8 * self.n as f64;
        self.a.row_sums().iter().all(|s| s.abs() < tol)
            && self.a.col_sums().iter().all(|s| s.abs() < tol)
    }
}

/// Pairwise Euclidean distances between rows of `x`, squared distances
/// clamped below at `eps`.
pub fn pairwise_dist(x: &Matrix, eps: f64) -> Result<Matrix> {
    if x.rows() < 2 {
        return Err(Error::SampleSize(format!(
            "pairwise distances need at least 2 rows, got {}",
            x.rows()
        )));
    }
    Ok(kernels::pairwise_dist(x, eps))
}

pub fn double_center(d: &Matrix) -> Result<CenteredDistanceMatrix> {
    if d.rows() != d.cols() {
        return Err(Error::Dim(format!(
            "double centering needs a square matrix, got {:?}",
            d.shape()
        )));
    }
    Ok(CenteredDistanceMatrix { n: d.rows(), a: kernels::double_center(d) })
}

struct DcorParts {
    a: Matrix,
    b: Matrix,
    /// sum(A .* B) / n^2 clamped at 0, and the two variance analogues.
    s_xy: f64,
    s_xx: f64,
    s_zz: f64,
}

fn dcor_parts(x: &Matrix, z: &Matrix) -> Result<DcorParts> {
    if x.rows() != z.rows() {
        return Err(Error::Dim(format!(
            "dcor needs matching sample counts, got {} vs {}",
            x.rows(),
            z.rows()
        )));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::SampleSize(format!("dcor needs n >= 2, got {}", n)));
    }
    let a = kernels::double_center(&kernels::pairwise_dist(x, DIST_EPS));
    let b = kernels::double_center(&kernels::pairwise_dist(z, DIST_EPS));
    let n2 = (n * n) as f64;
    let s_xy = (a.hadamard(&b).sum() / n2).max(0.0);
    let s_xx = (a.hadamard(&a).sum() / n2).max(0.0);
    let s_zz = (b.hadamard(&b).sum() / n2).max(0.0);
    Ok(DcorParts { a, b, s_xy, s_xx, s_zz })
}

/// Sample distance correlation between the rows of `x` and `z`.
pub fn dcor(x: &Matrix, z: &Matrix) -> Result<f64> {
    let p = dcor_parts(x, z)?;
    let dvar_x = p.s_xx.sqrt();
    let dvar_z = p.s_zz.sqrt();
    if dvar_x * dvar_z < DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance(format!(
            "distance variance product {:.3e} below {:.0e}",
            dvar_x * dvar_z,
            DEGENERATE_VARIANCE
        )));
    }
    Ok(p.s_xy.sqrt() / (dvar_x * dvar_z).sqrt())
}

/// Distance correlation recorded on the tape, differentiable w.r.t. both
/// arguments. The normalization is composed as dCov * exp(-0.5 log(vx * vz))
/// to stay within the registered operation set.
pub fn dcor_node(tape: &mut Tape, x: Var, z: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    if tape.value(z).rows() != n {
        return Err(Error::Dim(format!(
            "dcor needs matching sample counts, got {} vs {}",
            n,
            tape.value(z).rows()
        )));
    }
    if n < 2 {
        return Err(Error::SampleSize(format!("dcor needs n >= 2, got {}", n)));
    }
    let inv_n2 = 1.0 / (n * n) as f64;

    let dx = tape.pairwise_dist(x, DIST_EPS)?;
    let a = tape.double_center(dx)?;
    let dz = tape.pairwise_dist(z, DIST_EPS)?;
    let b = tape.double_center(dz)?;

    let ab = tape.hadamard(a, b)?;
    let ab_sum = tape.sum_all(ab);
    let s_xy = tape.scale(ab_sum, inv_n2);
    let dcov = tape.sqrt_clamp(s_xy, 0.0);

    let aa = tape.hadamard(a, a)?;
    let aa_sum = tape.sum_all(aa);
    let s_xx = tape.scale(aa_sum, inv_n2);
    let dvar_x = tape.sqrt_clamp(s_xx, 0.0);

    let bb = tape.hadamard(b, b)?;
    let bb_sum = tape.sum_all(bb);
    let s_zz = tape.scale(bb_sum, inv_n2);
    let dvar_z = tape.sqrt_clamp(s_zz, 0.0);

    let var_prod = tape.hadamard(dvar_x, dvar_z)?;
    if tape.value(var_prod).scalar_value() < DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance(format!(
            "distance variance product {:.3e} below {:.0e}",
            tape.value(var_prod).scalar_value(),
            DEGENERATE_VARIANCE
        )));
    }
    let log_prod = tape.log(var_prod)?;
    let neg_half = tape.scale(log_prod, -0.5);
    let inv_sqrt = tape.exp(neg_half);
    tape.hadamard(dcov, inv_sqrt)
}

/// Analytic gradient of squared distance correlation with respect to `z`,
/// derived directly from the estimator: with S_xy = sum(A .* D_z)/n^2 and
/// S_zz = sum(B .* D_z)/n^2 (valid because A and B are double centered),
///
///   d dCor^2 / dZ = [dS_xy - (S_xy / (2 S_zz)) dS_zz] / sqrt(S_xx S_zz)
///
/// where each directional term has the graph-Laplacian form
/// (diag(W 1) - W) Z with W = M .* mask / D_z. Serves as an independent
/// cross-check of the reverse-mode route; both are validated against
/// central finite differences.
pub fn dcor_grad_analytic(x: &Matrix, z: &Matrix) -> Result<Matrix> {
    let p = dcor_parts(x, z)?;
    if p.s_xx.sqrt() * p.s_zz.sqrt() < DEGENERATE_VARIANCE {
        return Err(Error::DegenerateVariance(format!(
            "distance variance product {:.3e} below {:.0e}",
            p.s_xx.sqrt() * p.s_zz.sqrt(),
            DEGENERATE_VARIANCE
        )));
    }
    let n = z.rows();
    let n2 = (n * n) as f64;
    let d_z = kernels::pairwise_dist(z, DIST_EPS);
    let mask = kernels::pairwise_clamp_mask(z, DIST_EPS);

    // (diag(W 1) - W) Z for W = M .* mask / D_z
    let lap_form = |m: &Matrix| -> Matrix {
        let w = Matrix::from_fn(n, n, |i, j| {
            if mask.at(i, j) == 0.0 {
                0.0
            } else {
                m.at(i, j) / d_z.at(i, j)
            }
        });
        let rs = w.row_sums();
        let mut lap = w.scale(-1.0);
        for i in 0..n {
            lap.set(i, i, lap.at(i, i) + rs[i]);
        }
        lap.matmul(z)
    };

    let grad_s_xy = lap_form(&p.a).scale(2.0 / n2);
    let grad_s_zz = lap_form(&p.b).scale(4.0 / n2);

    let denom = (p.s_xx * p.s_zz).sqrt();
    Ok(grad_s_xy
        .sub(&grad_s_zz.scale(p.s_xy / (2.0 * p.s_zz)))
        .scale(1.0 / denom))
}
