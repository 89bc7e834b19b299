//! SPD-preserving dimension compression on the compact Stiefel manifold.
//!
//! The compression weight `W` is a `d x d_hat` frame with orthonormal
//! columns. `Sigma_hat = W^T Sigma W` stays SPD, the loss gradient is pulled
//! back to the tangent space at `W`, and updates retract onto the manifold
//! through the sign-fixed QR factorization.

use crate::covpool::SpdMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

/// A point on the compact Stiefel manifold S(d_hat, d): orthonormal columns,
/// `d_hat < d`.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelMatrix {
    w: Matrix,
}

impl StiefelMatrix {
    /// Wrap a matrix, checking the orthonormality invariant to 1e-8.
    pub fn new(w: Matrix) -> Result<Self> {
        // d_hat = d is allowed: a square orthogonal frame, i.e. the
        // no-compression baseline.
        if w.cols() > w.rows() || w.cols() == 0 {
            return Err(Error::Config(format!(
                "Stiefel frame needs 1 <= d_hat <= d, got {}x{}",
                w.rows(),
                w.cols()
            )));
        }
        let drift = StiefelMatrix::orthogonality_drift_of(&w)?;
        if drift > 1e-8 {
            return Err(Error::InvalidInput(format!(
                "columns are not orthonormal: ||W^T W - I||_F = {:.3e}",
                drift
            )));
        }
        Ok(StiefelMatrix { w })
    }

    pub fn d(&self) -> usize {
        self.w.rows()
    }

    pub fn d_hat(&self) -> usize {
        self.w.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    fn orthogonality_drift_of(w: &Matrix) -> Result<f64> {
        let wtw = w.transpose().matmul(w)?;
        Ok(wtw.sub(&Matrix::identity(w.cols()))?.frobenius_norm())
    }

    /// `||W^T W - I||_F`, for invariant monitoring.
    pub fn orthogonality_drift(&self) -> f64 {
        StiefelMatrix::orthogonality_drift_of(&self.w).unwrap()
    }
}

/// A tangent vector at some frame `W`: `W^T V` is skew-symmetric.
#[derive(Debug, Clone)]
pub struct TangentVector {
    pub v: Matrix,
}

/// Random orthonormal frame: Q factor of a seeded Gaussian matrix.
pub fn init_stiefel(d: usize, d_hat: usize, seed: u64) -> Result<StiefelMatrix> {
    if d_hat == 0 || d_hat > d {
        return Err(Error::Config(format!(
            "need 1 <= d_hat <= d, got d = {}, d_hat = {}",
            d, d_hat
        )));
    }
    let mut rng = SeededRng::new(seed);
    let gauss = Matrix::from_fn(d, d_hat, |_, _| rng.normal());
    let (q, _) = gauss.qr_positive()?;
    StiefelMatrix::new(q)
}

/// `Sigma_hat = W^T Sigma W`, SPD whenever `Sigma` is.
pub fn compress(sigma: &SpdMatrix, w: &StiefelMatrix) -> Result<SpdMatrix> {
    if sigma.dim() != w.d() {
        return Err(Error::Shape(format!(
            "sigma is {0}x{0} but W is {1}x{2}",
            sigma.dim(),
            w.d(),
            w.d_hat()
        )));
    }
    let wt = w.matrix().transpose();
    let compressed = wt.matmul(sigma.matrix())?.matmul(w.matrix())?;
    SpdMatrix::new(compressed.symmetrize()?)
}

fn sym(g: &Matrix) -> Result<Matrix> {
    g.symmetrize()
}

/// Euclidean gradient of the loss with respect to `W`:
/// `dl/dW = 2 Sigma W sym(dl/dSigma_hat)`.
pub fn euclidean_grad(
    sigma: &SpdMatrix,
    w: &StiefelMatrix,
    grad_sigma_hat: &SpdMatrix,
) -> Result<Matrix> {
    if sigma.dim() != w.d() || grad_sigma_hat.dim() != w.d_hat() {
        return Err(Error::Shape(format!(
            "inconsistent shapes: sigma {0}, W {1}x{2}, grad {3}",
            sigma.dim(),
            w.d(),
            w.d_hat(),
            grad_sigma_hat.dim()
        )));
    }
    let s = sym(grad_sigma_hat.matrix())?;
    Ok(sigma
        .matrix()
        .matmul(w.matrix())?
        .matmul(&s)?
        .scale(2.0))
}

/// Project the Euclidean gradient to the tangent space:
/// `V = G - W G^T W`.
pub fn riemannian_grad(w: &StiefelMatrix, eucl_grad: &Matrix) -> Result<TangentVector> {
    if eucl_grad.rows() != w.d() || eucl_grad.cols() != w.d_hat() {
        return Err(Error::Shape(format!(
            "gradient is {}x{}, expected {}x{}",
            eucl_grad.rows(),
            eucl_grad.cols(),
            w.d(),
            w.d_hat()
        )));
    }
    let wgw = w
        .matrix()
        .matmul(&eucl_grad.transpose())?
        .matmul(w.matrix())?;
    Ok(TangentVector {
        v: eucl_grad.sub(&wgw)?,
    })
}

/// QR retraction `W_{t+1} = qf(W - eta V)`. If the step happens to lose rank,
/// eta is halved up to 10 times before surfacing the failure.
pub fn retract(w: &StiefelMatrix, v: &TangentVector, eta: f64) -> Result<StiefelMatrix> {
    if eta <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "retraction step must be positive, got {}",
            eta
        )));
    }
    let mut step = eta;
    for _ in 0..10 {
        let moved = w.matrix().sub(&v.v.scale(step))?;
        match moved.qr_positive() {
            Ok((q, _)) => return StiefelMatrix::new(q),
            Err(Error::Singular(_)) => step *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Singular(
        "retraction failed: W - eta V stayed rank deficient after shrinking eta".into(),
    ))
}

/// Adjoint of [`compress`] with respect to `Sigma`:
/// `dl/dSigma = W sym(dl/dSigma_hat) W^T`.
pub fn sigma_backward(w: &StiefelMatrix, grad_sigma_hat: &SpdMatrix) -> Result<SpdMatrix> {
    if grad_sigma_hat.dim() != w.d_hat() {
        return Err(Error::Shape(format!(
            "gradient dim {} does not match d_hat {}",
            grad_sigma_hat.dim(),
            w.d_hat()
        )));
    }
    let s = sym(grad_sigma_hat.matrix())?;
    let out = w
        .matrix()
        .matmul(&s)?
        .matmul(&w.matrix().transpose())?;
    SpdMatrix::new(out.symmetrize()?)
}
