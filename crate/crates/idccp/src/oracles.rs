//! Independent reference computations used to validate the hand-written
//! forward and backward passes: central finite differences, the
//! eigendecomposition square root, and a brute-force invariance probe.

use crate::covpool::SpdMatrix;
use crate::error::{Error, Result};
use crate::group::{self, GroupElement};
use crate::linalg::Matrix;
use crate::rng::SeededRng;
use crate::tensor::ImageTensor;

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over the checked coordinates.
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    /// Analytic and numeric values at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
    /// How many coordinates were actually probed.
    pub checked: usize,
}

/// Central-difference gradient check of `loss` at `point` against
/// `analytic_grad`, probing `sample` coordinates (all of them if `sample`
/// is zero or exceeds the dimension). Relative error per coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_grad<F>(
    loss: F,
    point: &[f64],
    analytic_grad: &[f64],
    step: f64,
    sample: usize,
    rng: &mut SeededRng,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if point.len() != analytic_grad.len() {
        return Err(Error::InvalidInput(format!(
            "point has {} coordinates but gradient has {}",
            point.len(),
            analytic_grad.len()
        )));
    }
    if point.is_empty() {
        return Err(Error::InvalidInput("empty point".into()));
    }
    let n = point.len();
    let indices: Vec<usize> = if sample == 0 || sample >= n {
        (0..n).collect()
    } else {
        let perm = rng.permutation(n);
        perm[..sample].to_vec()
    };
    let mut work = point.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: indices[0],
        analytic: analytic_grad[indices[0]],
        numeric: 0.0,
        checked: indices.len(),
    };
    for &i in &indices {
        let orig = work[i];
        work[i] = orig + step;
        let fp = loss(&work)?;
        work[i] = orig - step;
        let fm = loss(&work)?;
        work[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let analytic = analytic_grad[i];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Exact symmetric square root via eigendecomposition: `Psi L^(1/2) Psi^T`.
/// Fails if any eigenvalue is below `-1e-10 * trace` (not PSD); small
/// negative eigenvalues from roundoff are clamped to zero.
pub fn eig_sqrt(sigma: &SpdMatrix) -> Result<SpdMatrix> {
    let eig = sigma.matrix().sym_eig()?;
    let tol = -1e-10 * sigma.trace().abs().max(1.0);
    let d = sigma.dim();
    let mut root = Matrix::zeros(d, d);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < tol {
            return Err(Error::InvalidInput(format!(
                "matrix is not positive semidefinite: eigenvalue {} is {}",
                i, lambda
            )));
        }
        root.set(i, i, lambda.max(0.0).sqrt());
    }
    let psi = &eig.eigenvectors;
    let m = psi.matmul(&root)?.matmul(&psi.transpose())?;
    SpdMatrix::new(m.symmetrize()?)
}

/// Runs `pipeline` on every D4 pose of `image` and reports the worst
/// relative deviation of the output from the untransformed pose:
/// `max_g ||out(g x) - out(x)||_F / max(1e-12, ||out(x)||_F)`.
pub fn brute_force_invariance<F>(pipeline: F, image: &ImageTensor) -> Result<f64>
where
    F: Fn(&ImageTensor) -> Result<Matrix>,
{
    let base = pipeline(image)?;
    let denom = base.frobenius_norm().max(1e-12);
    let mut worst = 0.0f64;
    for &g in &group::ELEMENTS {
        if g == GroupElement::E {
            continue;
        }
        let out = pipeline(&group::act_on_image(g, image)?)?;
        worst = worst.max(out.sub(&base)?.frobenius_norm() / denom);
    }
    Ok(worst)
}
