//! Training configuration: a flat `key = value` text format, one key per
//! line, `#` comments, unknown keys rejected.

use crate::backbone::LayerSpec;
use crate::error::{Error, Result};
use std::fmt;
use std::path::Path;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Procedurally generated grating textures.
    Synthetic,
    /// One subdirectory per class containing image files.
    Folder(String),
}

/// All knobs of a training run. `Default` matches the reference protocol:
/// SGD momentum 0.9, weight decay 0.0005, lr 0.1 decaying by 0.9 every 10
/// epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub image_size: usize,
    pub channels: usize,
    pub backbone: Vec<LayerSpec>,
    pub feature_dim: usize,
    pub compressed_dim: usize,
    pub newton_schulz_iters: usize,
    pub classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_finetune: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub epsilon_scale: f64,
    pub augment_crop: bool,
    pub augment_flip: bool,
    pub dataset: DataSource,
    pub samples_per_class: usize,
    pub train_ratio: f64,
    /// When set, the second half of the epochs runs at `lr_finetune`
    /// (mirroring the head-training / fine-tuning split) instead of staying
    /// on `lr_initial`; the staircase decay applies in both regimes.
    pub two_phase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 42,
            image_size: 32,
            channels: 1,
            backbone: default_backbone_spec(32),
            feature_dim: 32,
            compressed_dim: 16,
            newton_schulz_iters: 5,
            classes: 4,
            batch_size: 32,
            epochs: 30,
            lr_initial: 0.1,
            lr_finetune: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_decay_factor: 0.9,
            lr_decay_every_epochs: 10,
            epsilon_scale: 1e-3,
            augment_crop: false,
            augment_flip: false,
            dataset: DataSource::Synthetic,
            samples_per_class: 200,
            train_ratio: 0.8,
            two_phase: false,
        }
    }
}

/// Compact backbone that ends with `d` channels: two strided stages then a
/// pointwise projection. Small enough for CPU training on toy data.
pub fn default_backbone_spec(d: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { kernel: 3, c_out: 8 },
        LayerSpec::Relu,
        LayerSpec::AvgPool { stride: 2 },
        LayerSpec::Conv { kernel: 3, c_out: 16 },
        LayerSpec::Relu,
        LayerSpec::AvgPool { stride: 2 },
        LayerSpec::Conv { kernel: 1, c_out: d },
    ]
}

/// Parses a backbone description like
/// `conv3:8,relu,avgpool2,conv3:16,relu,avgpool2,conv1:32`.
pub fn parse_backbone_spec(text: &str) -> Result<Vec<LayerSpec>> {
    let mut spec = Vec::new();
    for token in text.split(',') {
        let token = token.trim();
        if token.is_empty() {
            return Err(Error::Config("empty backbone layer token".into()));
        }
        if token == "relu" {
            spec.push(LayerSpec::Relu);
        } else if let Some(rest) = token.strip_prefix("conv") {
            let (k, c) = rest.split_once(':').ok_or_else(|| {
                Error::Config(format!("conv layer '{}' needs the form conv<k>:<channels>", token))
            })?;
            spec.push(LayerSpec::Conv {
                kernel: parse_num(k, token)?,
                c_out: parse_num(c, token)?,
            });
        } else if let Some(s) = token.strip_prefix("avgpool") {
            spec.push(LayerSpec::AvgPool { stride: parse_num(s, token)? });
        } else if let Some(s) = token.strip_prefix("maxpool") {
            spec.push(LayerSpec::MaxPool { stride: parse_num(s, token)? });
        } else {
            return Err(Error::Config(format!("unknown backbone layer '{}'", token)));
        }
    }
    if spec.is_empty() {
        return Err(Error::Config("backbone spec has no layers".into()));
    }
    Ok(spec)
}

fn parse_num(text: &str, token: &str) -> Result<usize> {
    text.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad number in backbone token '{}'", token)))
}

/// Renders a backbone spec back into the config string form.
pub fn backbone_spec_to_string(spec: &[LayerSpec]) -> String {
    spec.iter()
        .map(|l| match l {
            LayerSpec::Conv { kernel, c_out } => format!("conv{}:{}", kernel, c_out),
            LayerSpec::Relu => "relu".to_string(),
            LayerSpec::AvgPool { stride } => format!("avgpool{}", stride),
            LayerSpec::MaxPool { stride } => format!("maxpool{}", stride),
        })
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Parses the flat `key = value` text. Every key is optional and falls
    /// back to the default; unknown or duplicate keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got '{}'", lineno + 1, line))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{}'", lineno + 1, key)));
            }
            cfg.apply(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{}' for {}", value, key)))
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean '{}' for {}", value, key))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "backbone" => self.backbone = parse_backbone_spec(value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "compressed_dim" => self.compressed_dim = num(key, value)?,
            "newton_schulz_iters" => self.newton_schulz_iters = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "lr_initial" => self.lr_initial = num(key, value)?,
            "lr_finetune" => self.lr_finetune = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "lr_decay_every_epochs" => self.lr_decay_every_epochs = num(key, value)?,
            "epsilon_scale" => self.epsilon_scale = num(key, value)?,
            "augment_crop" => self.augment_crop = flag(key, value)?,
            "augment_flip" => self.augment_flip = flag(key, value)?,
            "dataset" => {
                self.dataset = if value == "synthetic" {
                    DataSource::Synthetic
                } else {
                    DataSource::Folder(value.to_string())
                }
            }
            "samples_per_class" => self.samples_per_class = num(key, value)?,
            "train_ratio" => self.train_ratio = num(key, value)?,
            "two_phase" => self.two_phase = flag(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{}'", key))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        // compressed_dim = feature_dim is the no-compression baseline
        // (square orthogonal W).
        if self.compressed_dim == 0 || self.compressed_dim > self.feature_dim {
            return Err(Error::Config(format!(
                "need 1 <= compressed_dim <= feature_dim, got {} and {}",
                self.compressed_dim, self.feature_dim
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.newton_schulz_iters < 1 {
            return Err(Error::Config("newton_schulz_iters must be at least 1".into()));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::Config(format!(
                "train_ratio must lie in (0,1), got {}",
                self.train_ratio
            )));
        }
        for (name, v) in [
            ("lr_initial", self.lr_initial),
            ("lr_finetune", self.lr_finetune),
            ("lr_decay_factor", self.lr_decay_factor),
            ("epsilon_scale", self.epsilon_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{} must be positive, got {}", name, v)));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{} must lie in [0,1), got {}", name, v)));
            }
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::Config("lr_decay_every_epochs must be positive".into()));
        }
        if self.dataset == DataSource::Synthetic {
            if self.classes > 16 {
                return Err(Error::Config(format!(
                    "synthetic data supports at most 16 classes, got {}",
                    self.classes
                )));
            }
            if self.image_size < 16 {
                return Err(Error::Config(format!(
                    "synthetic data needs image_size >= 16, got {}",
                    self.image_size
                )));
            }
            if self.channels != 1 {
                return Err(Error::Config("synthetic data is grayscale (channels = 1)".into()));
            }
        }
        match self.backbone.last() {
            Some(LayerSpec::Conv { c_out, .. }) if *c_out == self.feature_dim => {}
            _ => {
                return Err(Error::Config(format!(
                    "backbone must end with a conv producing feature_dim = {} channels",
                    self.feature_dim
                )))
            }
        }
        Ok(())
    }

    /// Learning rate for the Euclidean parameters at a given epoch:
    /// base regime (initial or fine-tune phase) times the staircase decay
    /// `factor^(epoch / every)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let base = if self.two_phase && epoch >= self.epochs / 2 {
            self.lr_finetune
        } else {
            self.lr_initial
        };
        base * self
            .lr_decay_factor
            .powi((epoch / self.lr_decay_every_epochs) as i32)
    }
}

impl fmt::Display for TrainConfig {
    /// Serializes in the same flat format `parse` reads; round-trips to an
    /// equal config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "image_size = {}", self.image_size)?;
        writeln!(f, "channels = {}", self.channels)?;
        writeln!(f, "backbone = {}", backbone_spec_to_string(&self.backbone))?;
        writeln!(f, "feature_dim = {}", self.feature_dim)?;
        writeln!(f, "compressed_dim = {}", self.compressed_dim)?;
        writeln!(f, "newton_schulz_iters = {}", self.newton_schulz_iters)?;
        writeln!(f, "classes = {}", self.classes)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "lr_initial = {}", self.lr_initial)?;
        writeln!(f, "lr_finetune = {}", self.lr_finetune)?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "weight_decay = {}", self.weight_decay)?;
        writeln!(f, "lr_decay_factor = {}", self.lr_decay_factor)?;
        writeln!(f, "lr_decay_every_epochs = {}", self.lr_decay_every_epochs)?;
        writeln!(f, "epsilon_scale = {}", self.epsilon_scale)?;
        writeln!(f, "augment_crop = {}", self.augment_crop)?;
        writeln!(f, "augment_flip = {}", self.augment_flip)?;
        match &self.dataset {
            DataSource::Synthetic => writeln!(f, "dataset = synthetic")?,
            DataSource::Folder(p) => writeln!(f, "dataset = {}", p)?,
        }
        writeln!(f, "samples_per_class = {}", self.samples_per_class)?;
        writeln!(f, "train_ratio = {}", self.train_ratio)?;
        writeln!(f, "two_phase = {}", self.two_phase)
    }
}
