//! Trace-form linear classifier on the normalized covariance: one weight
//! matrix per class, logit `tr(W_k^T C_hat) + b_k`, softmax cross-entropy
//! with L2 regularization on the weights.
//!
//! The weights are stored unconstrained, but because `C_hat` is symmetric
//! only the symmetric part of each `W_k` affects the logits; the
//! antisymmetric part receives zero gradient and, with zero initialization,
//! stays zero.

use crate::covpool::SpdMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Per-class weight matrices and biases.
#[derive(Debug, Clone)]
pub struct ClassifierWeights {
    pub weights: Vec<Matrix>,
    pub biases: Vec<f64>,
}

impl ClassifierWeights {
    /// Zero initialization: the loss at fixed features is convex in the
    /// weights, so the symmetric zero start is canonical.
    pub fn zeros(num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                num_classes
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidInput("classifier dimension is zero".into()));
        }
        Ok(ClassifierWeights {
            weights: vec![Matrix::zeros(dim, dim); num_classes],
            biases: vec![0.0; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.weights[0].rows()
    }

    /// Total parameter count: K * (dim^2 + 1).
    pub fn num_params(&self) -> usize {
        self.num_classes() * (self.dim() * self.dim() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.biases.len() {
            return Err(Error::Shape(format!(
                "{} weight matrices but {} biases",
                self.weights.len(),
                self.biases.len()
            )));
        }
        let d = self.dim();
        for (k, w) in self.weights.iter().enumerate() {
            if w.rows() != d || w.cols() != d {
                return Err(Error::Shape(format!(
                    "class {} weight is {}x{}, expected {}x{}",
                    k,
                    w.rows(),
                    w.cols(),
                    d,
                    d
                )));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("class {} weight", k)));
            }
        }
        if !self.biases.iter().all(|b| b.is_finite()) {
            return Err(Error::NonFinite("classifier bias".into()));
        }
        Ok(())
    }
}

/// Loss breakdown plus the per-sample logits of the evaluated batch.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub data_loss: f64,
    pub reg_loss: f64,
    pub total: f64,
    pub logits: Vec<Vec<f64>>,
}

/// Gradients of the batch loss with respect to the classifier parameters.
#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<f64>,
}

/// `logit_k = tr(W_k^T C_hat) + b_k` for every class.
pub fn logits(c_hat: &SpdMatrix, weights: &ClassifierWeights) -> Result<Vec<f64>> {
    if c_hat.dim() != weights.dim() {
        return Err(Error::Shape(format!(
            "feature dim {} does not match classifier dim {}",
            c_hat.dim(),
            weights.dim()
        )));
    }
    weights
        .weights
        .iter()
        .zip(&weights.biases)
        .map(|(w, &b)| Ok(w.dot(c_hat.matrix())? + b))
        .collect()
}

/// Stable softmax probabilities and the log-sum-exp of the logits.
fn softmax(logit_row: &[f64]) -> (Vec<f64>, f64) {
    let m = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logit_row.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|&e| e / sum).collect();
    (probs, m + sum.ln())
}

/// Mean softmax cross-entropy over the batch plus `(lambda/2) * sum_k
/// ||W_k||_F^2`, with exact gradients: parameter gradients, and per sample
/// the gradient of the batch loss with respect to that sample's `C_hat`
/// (the 1/N batch averaging is folded in).
pub fn loss_and_grads(
    batch: &[(SpdMatrix, usize)],
    weights: &ClassifierWeights,
    lambda: f64,
) -> Result<(LossReport, ClassifierGrads, Vec<SpdMatrix>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if lambda < 0.0 {
        return Err(Error::InvalidInput(format!(
            "negative regularization strength {}",
            lambda
        )));
    }
    let k = weights.num_classes();
    let d = weights.dim();
    let n = batch.len() as f64;
    let mut grads = ClassifierGrads {
        weights: vec![Matrix::zeros(d, d); k],
        biases: vec![0.0; k],
    };
    let mut grad_c_hats = Vec::with_capacity(batch.len());
    let mut all_logits = Vec::with_capacity(batch.len());
    let mut data_loss = 0.0;
    // Symmetric parts used by every sample's feature gradient.
    let sym_w: Vec<Matrix> = weights
        .weights
        .iter()
        .map(|w| w.symmetrize())
        .collect::<Result<_>>()?;
    for (c_hat, label) in batch {
        if *label >= k {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                label, k
            )));
        }
        let z = logits(c_hat, weights)?;
        let (probs, lse) = softmax(&z);
        data_loss += (lse - z[*label]) / n;
        let mut grad_c = Matrix::zeros(d, d);
        for j in 0..k {
            let delta = (probs[j] - if j == *label { 1.0 } else { 0.0 }) / n;
            // d logit_j / d W_j = C_hat; d logit_j / d C_hat = sym(W_j).
            grads.weights[j] = grads.weights[j].add(&c_hat.matrix().scale(delta))?;
            grads.biases[j] += delta;
            grad_c = grad_c.add(&sym_w[j].scale(delta))?;
        }
        grad_c_hats.push(SpdMatrix::new(grad_c)?);
        all_logits.push(z);
    }
    let mut reg_loss = 0.0;
    for j in 0..k {
        reg_loss += 0.5 * lambda * weights.weights[j].dot(&weights.weights[j])?;
        grads.weights[j] = grads.weights[j].add(&weights.weights[j].scale(lambda))?;
    }
    let report = LossReport {
        data_loss,
        reg_loss,
        total: data_loss + reg_loss,
        logits: all_logits,
    };
    Ok((report, grads, grad_c_hats))
}

/// Argmax of the logits; ties break toward the lowest class index.
pub fn predict(c_hat: &SpdMatrix, weights: &ClassifierWeights) -> Result<usize> {
    let z = logits(c_hat, weights)?;
    let mut best = 0;
    for (j, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = j;
        }
    }
    Ok(best)
}
