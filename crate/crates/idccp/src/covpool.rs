//! Second-order (scatter covariance) pooling over the group-indexed feature
//! stack, with the trivial projection realized as the orbit average of the
//! per-branch covariance matrices, plus the backward pass.

use crate::backbone::FeatureStack;
use crate::error::{Error, Result};
use crate::group::ELEMENTS;
use crate::linalg::Matrix;

/// A symmetric positive (semi)definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    mat: Matrix,
}

impl SpdMatrix {
    /// Wrap a matrix, checking symmetry to 1e-10 relative asymmetry.
    /// Positive semidefiniteness is a property of how these matrices are
    /// produced and is asserted by tests, not rechecked on every call.
    pub fn new(mat: Matrix) -> Result<Self> {
        if mat.rows() != mat.cols() {
            return Err(Error::Shape(format!(
                "SPD matrix must be square, got {}x{}",
                mat.rows(),
                mat.cols()
            )));
        }
        let asym = mat.asymmetry();
        if asym > 1e-10 {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(SpdMatrix {
            mat: mat.symmetrize()?,
        })
    }

    pub fn dim(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mat
    }

    pub fn into_matrix(self) -> Matrix {
        self.mat
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }

    /// Smallest eigenvalue, via the Jacobi eigensolver.
    pub fn min_eigenvalue(&self) -> Result<f64> {
        let eig = self.mat.sym_eig()?;
        Ok(*eig.eigenvalues.last().unwrap())
    }
}

/// Scatter covariance of a `d x n` feature matrix:
/// `Sigma = (1/n) F Ibar F^T` with `Ibar` the centering matrix.
pub fn covariance(f: &Matrix) -> Result<SpdMatrix> {
    let (d, n) = (f.rows(), f.cols());
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "covariance needs at least 2 feature columns, got {}",
            n
        )));
    }
    // Center rows, then (1/n) Fc Fc^T; algebraically equal to F Ibar F^T
    // since Ibar is an idempotent symmetric projector.
    let mut centered = f.clone();
    for i in 0..d {
        let row = &mut centered.data_mut()[i * n..(i + 1) * n];
        let mean: f64 = row.iter().sum::<f64>() / n as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    let sigma = centered
        .matmul(&centered.transpose())?
        .scale(1.0 / n as f64);
    SpdMatrix::new(sigma.symmetrize()?)
}

/// Trivial projection of the group orbit: the mean of the per-branch
/// covariances, reduced in the fixed group order.
pub fn group_average_covariance(stack: &FeatureStack) -> Result<SpdMatrix> {
    let shape = (stack.branches[0].rows(), stack.branches[0].cols());
    let mut acc = Matrix::zeros(shape.0, shape.0);
    for g in ELEMENTS {
        let b = stack.branch(g);
        if (b.rows(), b.cols()) != shape {
            return Err(Error::Shape(format!(
                "branch {:?} has shape {}x{}, expected {}x{}",
                g,
                b.rows(),
                b.cols(),
                shape.0,
                shape.1
            )));
        }
        acc = acc.add(covariance(b)?.matrix())?;
    }
    SpdMatrix::new(acc.scale(1.0 / 8.0))
}

/// Shift the spectrum up by `eps_scale * (trace/d + 1e-12)` so downstream
/// operations see a strictly positive definite matrix.
pub fn regularize(sigma: &SpdMatrix, eps_scale: f64) -> Result<SpdMatrix> {
    if eps_scale <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "eps_scale must be positive, got {}",
            eps_scale
        )));
    }
    let d = sigma.dim();
    let shift = eps_scale * (sigma.trace() / d as f64 + 1e-12);
    let mut mat = sigma.matrix().clone();
    for i in 0..d {
        let v = mat.get(i, i) + shift;
        mat.set(i, i, v);
    }
    SpdMatrix::new(mat)
}

/// Adjoint of [`group_average_covariance`]: the per-branch feature gradient
/// `(1/8) (1/n) (G + G^T) F_g Ibar` for upstream gradient `G`.
pub fn covariance_backward(
    stack: &FeatureStack,
    grad_sigma: &SpdMatrix,
) -> Result<[Matrix; 8]> {
    let d = stack.branches[0].rows();
    let n = stack.branches[0].cols();
    if grad_sigma.dim() != d {
        return Err(Error::Shape(format!(
            "covariance gradient is {0}x{0}, features have {1} channels",
            grad_sigma.dim(),
            d
        )));
    }
    let sym2 = grad_sigma
        .matrix()
        .add(&grad_sigma.matrix().transpose())?;
    let scale = 1.0 / (8.0 * n as f64);
    let mut out: Vec<Matrix> = Vec::with_capacity(8);
    for g in ELEMENTS {
        let mut gb = sym2.matmul(stack.branch(g))?;
        // Right-multiply by the centering matrix = subtract each row's mean.
        for i in 0..d {
            let row = &mut gb.data_mut()[i * n..(i + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
        out.push(gb.scale(scale));
    }
    Ok(out.try_into().unwrap())
}
