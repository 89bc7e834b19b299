//! Matrix square-root normalization by the coupled Newton-Schulz iteration.
//!
//! The input is trace pre-normalized (`C0 = Sigma_hat / tr(Sigma_hat)`,
//! `D0 = I`), iterated
//!
//! ```text
//! C_j = 1/2 C_{j-1} (3 I - D_{j-1} C_{j-1})
//! D_j = 1/2 (3 I - D_{j-1} C_{j-1}) D_{j-1}
//! ```
//!
//! and trace post-compensated: `C_hat = sqrt(tr(Sigma_hat)) C_J`. The trace
//! normalization puts every strictly PD input inside the convergence region
//! `||I - C0||_2 < 1`. Each iterate is re-symmetrized so roundoff does not
//! accumulate into asymmetry. The backward pass unrolls the stored tape, so
//! the gradient is exact for the computation actually performed.

use crate::covpool::SpdMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Intermediates of one forward call, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct NewtonSchulzTape {
    pub c_list: Vec<Matrix>,
    pub d_list: Vec<Matrix>,
    pub trace_value: f64,
    pub iterations: usize,
}

/// Approximate square root of a strictly PD matrix. Returns `C_hat` with
/// `C_hat^2 ~ Sigma_hat` plus the tape for the backward pass.
pub fn newton_schulz_sqrt(
    sigma_hat: &SpdMatrix,
    iterations: usize,
) -> Result<(SpdMatrix, NewtonSchulzTape)> {
    if iterations == 0 {
        return Err(Error::InvalidInput(
            "newton_schulz_sqrt needs at least one iteration".into(),
        ));
    }
    let t = sigma_hat.trace();
    if t <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "newton_schulz_sqrt needs a positive trace, got {}",
            t
        )));
    }
    let n = sigma_hat.dim();
    let eye3 = Matrix::identity(n).scale(3.0);
    let mut c_list = Vec::with_capacity(iterations + 1);
    let mut d_list = Vec::with_capacity(iterations + 1);
    c_list.push(sigma_hat.matrix().scale(1.0 / t));
    d_list.push(Matrix::identity(n));
    for j in 1..=iterations {
        let c_prev = &c_list[j - 1];
        let d_prev = &d_list[j - 1];
        let a = eye3.sub(&d_prev.matmul(c_prev)?)?;
        let c = c_prev.matmul(&a)?.scale(0.5).symmetrize()?;
        let d = a.matmul(d_prev)?.scale(0.5).symmetrize()?;
        if !c.is_finite() || !d.is_finite() {
            return Err(Error::Divergence(format!(
                "Newton-Schulz iterate {} is non-finite",
                j
            )));
        }
        c_list.push(c);
        d_list.push(d);
    }
    let c_hat = SpdMatrix::new(c_list[iterations].scale(t.sqrt()))?;
    Ok((
        c_hat,
        NewtonSchulzTape {
            c_list,
            d_list,
            trace_value: t,
            iterations,
        },
    ))
}

/// Reverse-mode differentiation through the tape: maps `dl/dC_hat` to
/// `dl/dSigma_hat`, including both trace normalizations.
pub fn newton_schulz_backward(
    tape: &NewtonSchulzTape,
    grad_c_hat: &SpdMatrix,
) -> Result<SpdMatrix> {
    let n = tape.c_list[0].rows();
    if grad_c_hat.dim() != n {
        return Err(Error::Shape(format!(
            "gradient dim {} does not match tape dim {}",
            grad_c_hat.dim(),
            n
        )));
    }
    let t = tape.trace_value;
    // C_hat = sqrt(t) C_J.
    let mut grad_c = grad_c_hat.matrix().scale(t.sqrt());
    let mut grad_t = grad_c_hat.matrix().dot(&tape.c_list[tape.iterations])? / (2.0 * t.sqrt());
    let mut grad_d = Matrix::zeros(n, n);
    for j in (1..=tape.iterations).rev() {
        let p = &tape.c_list[j - 1];
        let q = &tape.d_list[j - 1];
        // Forward symmetrized both outputs; sym is self-adjoint.
        let gc = grad_c.symmetrize()?;
        let gd = grad_d.symmetrize()?;
        let pt = p.transpose();
        let qt = q.transpose();
        // C_j = 1/2 (3 P - P Q P), D_j = 1/2 (3 Q - Q P Q).
        let grad_p = gc
            .scale(1.5)
            .sub(&gc.matmul(&pt)?.matmul(&qt)?.scale(0.5))?
            .sub(&qt.matmul(&pt)?.matmul(&gc)?.scale(0.5))?
            .sub(&qt.matmul(&gd)?.matmul(&qt)?.scale(0.5))?;
        let grad_q = gd
            .scale(1.5)
            .sub(&gd.matmul(&qt)?.matmul(&pt)?.scale(0.5))?
            .sub(&pt.matmul(&qt)?.matmul(&gd)?.scale(0.5))?
            .sub(&pt.matmul(&gc)?.matmul(&pt)?.scale(0.5))?;
        grad_c = grad_p;
        grad_d = grad_q;
    }
    // C0 = Sigma_hat / t with t = tr(Sigma_hat); D0 carries no gradient.
    let sigma0 = tape.c_list[0].scale(t); // reconstructed Sigma_hat
    grad_t -= grad_c.dot(&sigma0)? / (t * t);
    let mut grad_sigma = grad_c.scale(1.0 / t);
    for i in 0..n {
        let v = grad_sigma.get(i, i) + grad_t;
        grad_sigma.set(i, i, v);
    }
    SpdMatrix::new(grad_sigma.symmetrize()?)
}

/// `||I - Sigma_hat / tr(Sigma_hat)||_2`, the quantity controlling
/// convergence. Below 1 the iteration converges; trace normalization makes
/// that automatic for PD inputs.
pub fn convergence_check(sigma_hat: &SpdMatrix) -> Result<f64> {
    let t = sigma_hat.trace();
    let n = sigma_hat.dim();
    let normalized = sigma_hat.matrix().scale(1.0 / t);
    let gap = Matrix::identity(n).sub(&normalized)?.symmetrize()?;
    let eig = gap.sym_eig()?;
    Ok(eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs())))
}
