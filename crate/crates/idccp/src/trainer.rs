//! Training and evaluation harness: mixed Euclidean / Riemannian SGD over
//! the full pipeline, per-epoch metrics, checkpointing, and the model size
//! report.

use crate::backbone::ConvNetParams;
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::classifier::{self, ClassifierWeights};
use crate::config::{DataSource, TrainConfig};
use crate::data::{generate_synthetic_dataset, load_image_folder, Dataset};
use crate::error::{Error, Result};
use crate::group::{self, ELEMENTS};
use crate::linalg::Matrix;
use crate::pipeline::{backward_sample, forward_sample, Model, PipelineSettings};
use crate::rng::SeededRng;
use crate::stiefel::{self, init_stiefel};
use std::fmt;
use std::path::Path;

/// Evaluation summary over a dataset.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    /// Mean over samples of `max_g ||logits(x) - logits(T_g x)||_inf /
    /// (1 + ||logits(x)||_inf)` — comparable against the 1e-6 bound.
    pub mean_invariance_error: f64,
}

/// One row of the training history.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss (data + regularization) over the epoch.
    pub loss: f64,
    /// Held-out accuracy after the epoch.
    pub accuracy: f64,
    /// Invariance error on a fixed held-out subset.
    pub invariance_error: f64,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub metrics: Metrics,
}

fn settings_of(config: &TrainConfig) -> PipelineSettings {
    PipelineSettings {
        newton_schulz_iters: config.newton_schulz_iters,
        epsilon_scale: config.epsilon_scale,
        branch_e_only: false,
    }
}

/// Loads the dataset named by the config.
pub fn load_dataset(config: &TrainConfig) -> Result<Dataset> {
    match &config.dataset {
        DataSource::Synthetic => generate_synthetic_dataset(
            config.classes,
            config.image_size,
            config.samples_per_class,
            config.seed,
        ),
        DataSource::Folder(path) => {
            let (ds, _warnings) =
                load_image_folder(Path::new(path), config.image_size, config.channels)?;
            if ds.num_classes != config.classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes but the config says {}",
                    ds.num_classes, config.classes
                )));
            }
            Ok(ds)
        }
    }
}

fn fresh_model(config: &TrainConfig, rng: &mut SeededRng) -> Result<Model> {
    let backbone = ConvNetParams::init(&config.backbone, config.channels, rng)?;
    let out = backbone.out_channels(config.channels);
    if out != config.feature_dim {
        return Err(Error::Config(format!(
            "backbone produces {} channels but feature_dim is {}",
            out, config.feature_dim
        )));
    }
    let w = init_stiefel(config.feature_dim, config.compressed_dim, config.seed ^ 0x5eed)?;
    let classifier = ClassifierWeights::zeros(config.classes, config.compressed_dim)?;
    Ok(Model { backbone, w, classifier })
}

/// Trains a model from scratch or from a resume checkpoint. `on_epoch` is
/// called with each completed epoch's record.
pub fn train(
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    train_until(config, resume, config.epochs, on_epoch)
}

/// Like [`train`], but stops after `stop_epoch` epochs (clamped to the
/// configured total) so a run can be interrupted and resumed; the learning
/// rate schedule still follows the configured total epoch count.
pub fn train_until(
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    stop_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let stop_epoch = stop_epoch.min(config.epochs);
    let dataset = load_dataset(config)?;
    if dataset.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    for (label, count) in dataset.class_counts().iter().enumerate() {
        if *count < 2 {
            return Err(Error::Data(format!(
                "class {} has {} samples; need at least 2",
                label, count
            )));
        }
    }
    let (train_set, test_set) = dataset.split(config.train_ratio, config.seed.wrapping_add(1))?;
    let settings = settings_of(config);

    let (mut model, mut optimizer, mut rng, start_epoch, mut history) = match resume {
        Some(ckpt) => {
            if ckpt.config != *config {
                return Err(Error::Config(
                    "resume checkpoint was produced by a different config".into(),
                ));
            }
            let rng = ckpt.restore_rng();
            (ckpt.model, ckpt.optimizer, rng, ckpt.epoch, Vec::new())
        }
        None => {
            let mut rng = SeededRng::new(config.seed);
            let model = fresh_model(config, &mut rng)?;
            let optimizer = OptimizerState::zeros(
                model.backbone.num_params(),
                config.classes,
                config.compressed_dim,
            );
            (model, optimizer, rng, 0, Vec::new())
        }
    };

    for epoch in start_epoch..stop_epoch {
        let lr = config.learning_rate(epoch);
        let order = rng.permutation(train_set.len());
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let step = train_step(config, &settings, &model, &train_set, batch_idx)
                .map_err(|e| at_epoch(e, epoch))?;
            if !step.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became non-finite at epoch {}",
                    epoch
                )));
            }
            epoch_loss += step.loss * batch_idx.len() as f64;
            seen += batch_idx.len();
            apply_update(config, &mut model, &mut optimizer, &step, lr)
                .map_err(|e| at_epoch(e, epoch))?;
        }
        // Stiefel invariant at every epoch boundary.
        let drift = model.w.orthogonality_drift();
        if drift > 1e-8 {
            return Err(Error::Divergence(format!(
                "Stiefel orthogonality drifted to {:.3e} at epoch {}",
                drift, epoch
            )));
        }
        let eval = quick_eval(&model, &settings, &test_set)?;
        let record = EpochRecord {
            epoch,
            loss: epoch_loss / seen.max(1) as f64,
            accuracy: eval.0,
            invariance_error: eval.1,
        };
        on_epoch(&record);
        history.push(record);
    }

    let metrics = evaluate_model(&model, &settings, &test_set)?;
    let checkpoint = Checkpoint {
        config: config.clone(),
        model,
        optimizer,
        epoch: stop_epoch,
        rng_seed: config.seed,
        rng_counter: rng.word_pos(),
    };
    Ok(TrainOutcome { checkpoint, history, metrics })
}

fn at_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(what) => {
            Error::Divergence(format!("non-finite value in {} at epoch {}", what, epoch))
        }
        other => other,
    }
}

struct StepGrads {
    loss: f64,
    backbone: ConvNetParams,
    w_euclidean: Matrix,
    classifier: crate::classifier::ClassifierGrads,
}

fn train_step(
    config: &TrainConfig,
    settings: &PipelineSettings,
    model: &Model,
    train_set: &Dataset,
    batch_idx: &[usize],
) -> Result<StepGrads> {
    // Per-sample SPD pipeline; gradients are averaged over the batch (the
    // 1/N is folded into the classifier's per-sample feature gradients).
    let mut tapes = Vec::with_capacity(batch_idx.len());
    let mut batch = Vec::with_capacity(batch_idx.len());
    for &i in batch_idx {
        let tape = forward_sample(&model.backbone, &model.w, settings, &train_set.images[i])?;
        batch.push((tape.c_hat.clone(), train_set.labels[i]));
        tapes.push(tape);
    }
    let (report, cls_grads, grad_c_hats) =
        classifier::loss_and_grads(&batch, &model.classifier, config.weight_decay)?;
    let mut backbone_acc = model.backbone.zeros_like();
    let mut w_acc = Matrix::zeros(model.w.d(), model.w.d_hat());
    for (tape, grad_c_hat) in tapes.iter().zip(&grad_c_hats) {
        let g = backward_sample(&model.backbone, &model.w, settings, tape, grad_c_hat)?;
        backbone_acc.zip_apply(&g.backbone, |a, b| a + b)?;
        w_acc = w_acc.add(&g.w_euclidean)?;
    }
    Ok(StepGrads {
        loss: report.total,
        backbone: backbone_acc,
        w_euclidean: w_acc,
        classifier: cls_grads,
    })
}

fn apply_update(
    config: &TrainConfig,
    model: &mut Model,
    optimizer: &mut OptimizerState,
    step: &StepGrads,
    lr: f64,
) -> Result<()> {
    let mu = config.momentum;
    let wd = config.weight_decay;
    // Backbone: SGD with momentum and weight decay.
    let grads = step.backbone.to_flat();
    let mut params = model.backbone.to_flat();
    for ((p, v), g) in params
        .iter_mut()
        .zip(optimizer.backbone_velocity.iter_mut())
        .zip(&grads)
    {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    model.backbone.set_from_flat(&params)?;
    // Classifier: same update; the L2 term is already in the gradients, so
    // no extra decay is applied here.
    for k in 0..model.classifier.num_classes() {
        let v = optimizer.classifier_velocity[k]
            .scale(mu)
            .add(&step.classifier.weights[k])?;
        model.classifier.weights[k] = model.classifier.weights[k].sub(&v.scale(lr))?;
        optimizer.classifier_velocity[k] = v;
        let vb = mu * optimizer.bias_velocity[k] + step.classifier.biases[k];
        model.classifier.biases[k] -= lr * vb;
        optimizer.bias_velocity[k] = vb;
    }
    // W: plain Riemannian SGD — no momentum (velocities leave the tangent
    // space under retraction) and no weight decay (W is constrained, not
    // shrunk).
    let tangent = stiefel::riemannian_grad(&model.w, &step.w_euclidean)?;
    model.w = stiefel::retract(&model.w, &tangent, lr)?;
    Ok(())
}

/// Cheap per-epoch evaluation: accuracy on the whole held-out set plus the
/// invariance error on a small fixed subset.
fn quick_eval(
    model: &Model,
    settings: &PipelineSettings,
    test_set: &Dataset,
) -> Result<(f64, f64)> {
    let mut correct = 0usize;
    for (img, &label) in test_set.images.iter().zip(&test_set.labels) {
        let tape = forward_sample(&model.backbone, &model.w, settings, img)?;
        if classifier::predict(&tape.c_hat, &model.classifier)? == label {
            correct += 1;
        }
    }
    let subset = test_set.len().min(4);
    let inv = mean_invariance_error(model, settings, &test_set.images[..subset])?;
    Ok((correct as f64 / test_set.len().max(1) as f64, inv))
}

fn mean_invariance_error(
    model: &Model,
    settings: &PipelineSettings,
    images: &[crate::tensor::ImageTensor],
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for img in images {
        let base = crate::pipeline::forward_logits(model, settings, img)?;
        let scale = 1.0 + base.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for &g in &ELEMENTS {
            let z = crate::pipeline::forward_logits(model, settings, &group::act_on_image(g, img)?)?;
            for (a, b) in base.iter().zip(&z) {
                worst = worst.max((a - b).abs());
            }
        }
        total += worst / scale;
    }
    Ok(total / images.len() as f64)
}

fn evaluate_model(model: &Model, settings: &PipelineSettings, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if model.classifier.num_classes() != dataset.num_classes {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {}",
            model.classifier.num_classes(),
            dataset.num_classes
        )));
    }
    let k = dataset.num_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        let tape = forward_sample(&model.backbone, &model.w, settings, img)?;
        let pred = classifier::predict(&tape.c_hat, &model.classifier)?;
        confusion[label][pred] += 1;
    }
    let counts = dataset.class_counts();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / counts[c] as f64
            }
        })
        .collect();
    let mean_invariance_error = mean_invariance_error(model, settings, &dataset.images)?;
    Ok(Metrics {
        accuracy: correct as f64 / dataset.len() as f64,
        per_class_accuracy,
        confusion,
        mean_invariance_error,
    })
}

/// Evaluates a checkpoint on a dataset.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Metrics> {
    evaluate_model(&checkpoint.model, &settings_of(&checkpoint.config), dataset)
}

/// Symbolic parameter accounting: how the compressed representation
/// compares against the uncompressed d x d covariance.
#[derive(Debug, Clone)]
pub struct ModelReport {
    pub feature_dim: usize,
    pub compressed_dim: usize,
    pub classes: usize,
    /// Flattened feature size d_hat^2 seen by the classifier.
    pub feature_size: usize,
    /// Classifier weight count K * d_hat^2 (biases excluded).
    pub classifier_params: usize,
    /// Projection (compression) layer size d * d_hat.
    pub projection_params: usize,
    /// Backbone parameter count for the configured spec.
    pub backbone_params: usize,
    /// Feature-size reduction factor (d/d_hat)^2 vs. the d^2 baseline.
    pub reduction_ratio: f64,
}

pub fn model_report(config: &TrainConfig) -> Result<ModelReport> {
    config.validate()?;
    let mut rng = SeededRng::new(0);
    let backbone = ConvNetParams::init(&config.backbone, config.channels, &mut rng)?;
    let d = config.feature_dim;
    let dh = config.compressed_dim;
    Ok(ModelReport {
        feature_dim: d,
        compressed_dim: dh,
        classes: config.classes,
        feature_size: dh * dh,
        classifier_params: config.classes * dh * dh,
        projection_params: d * dh,
        backbone_params: backbone.num_params(),
        reduction_ratio: (d as f64 / dh as f64).powi(2),
    })
}

impl fmt::Display for ModelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "feature dim d                : {}", self.feature_dim)?;
        writeln!(f, "compressed dim d_hat         : {}", self.compressed_dim)?;
        writeln!(f, "flattened feature size d_hat^2: {}", self.feature_size)?;
        writeln!(
            f,
            "classifier params K*d_hat^2  : {} ({} classes)",
            self.classifier_params, self.classes
        )?;
        writeln!(f, "projection params d*d_hat    : {}", self.projection_params)?;
        writeln!(f, "backbone params              : {}", self.backbone_params)?;
        writeln!(
            f,
            "feature reduction vs. d^2={}  : {:.2}x",
            self.feature_dim * self.feature_dim,
            self.reduction_ratio
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy          : {:.4}", self.accuracy)?;
        writeln!(f, "invariance error  : {:.3e}", self.mean_invariance_error)?;
        for (c, acc) in self.per_class_accuracy.iter().enumerate() {
            writeln!(f, "class {:<3} accuracy: {:.4}", c, acc)?;
        }
        writeln!(f, "confusion matrix (rows = true class):")?;
        for row in &self.confusion {
            write!(f, " ")?;
            for v in row {
                write!(f, " {:>5}", v)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
