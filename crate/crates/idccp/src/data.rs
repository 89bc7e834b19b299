//! Data ingestion: a procedural grating-texture generator whose class
//! identity is invariant under the dihedral group, and a class-per-directory
//! image folder loader.

use crate::error::{Error, Result};
use crate::group::{self, ELEMENTS};
use crate::rng::SeededRng;
use crate::tensor::ImageTensor;
use std::f64::consts::PI;
use std::path::Path;

/// A labeled image set. Labels are 0-based class indices.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Samples per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Seeded random partition into (train, test) by `train_ratio`.
    pub fn split(&self, train_ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(Error::InvalidInput(format!(
                "train_ratio must lie in (0,1), got {}",
                train_ratio
            )));
        }
        if self.len() < 2 {
            return Err(Error::Data("need at least 2 samples to split".into()));
        }
        let mut rng = SeededRng::new(seed);
        let perm = rng.permutation(self.len());
        let n_train = ((self.len() as f64 * train_ratio).round() as usize)
            .clamp(1, self.len() - 1);
        let pick = |idx: &[usize]| Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        };
        Ok((pick(&perm[..n_train]), pick(&perm[n_train..])))
    }
}

/// Per-class grating parameters: `k+1` oriented sinusoids for class `k`,
/// with class-specific spatial frequencies so the power spectrum separates
/// the classes no matter the pose.
fn class_gratings(class: usize) -> Vec<(f64, f64)> {
    (0..=class)
        .map(|i| {
            // cycles per image in [2, 10); distinct across (class, i).
            let freq = 2.0 + ((3 * class + 5 * i) % 11) as f64 * 0.7;
            let angle = PI * (i as f64 + 0.5) / (class as f64 + 2.0) + 0.37 * class as f64;
            (freq, angle)
        })
        .collect()
}

/// Grayscale grating textures: class `k` is a sum of `k+1` oriented
/// sinusoids at class-specific frequencies, plus Gaussian noise (sigma
/// 0.05), each sample drawn at a random phase and pushed through a uniformly
/// random group pose. Deterministic for a fixed seed.
pub fn generate_synthetic_dataset(
    classes: usize,
    image_size: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || classes > 16 {
        return Err(Error::Config(format!(
            "synthetic generator supports 2..=16 classes, got {}",
            classes
        )));
    }
    if image_size < 16 {
        return Err(Error::Config(format!(
            "synthetic generator needs image_size >= 16, got {}",
            image_size
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut images = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    let s = image_size as f64;
    for class in 0..classes {
        let gratings = class_gratings(class);
        let amp = 1.0 / gratings.len() as f64;
        for _ in 0..n_per_class {
            let phases: Vec<f64> = gratings.iter().map(|_| rng.uniform() * 2.0 * PI).collect();
            let mut data = vec![0.0; image_size * image_size];
            for i in 0..image_size {
                for j in 0..image_size {
                    let (y, x) = (i as f64 / s, j as f64 / s);
                    let mut v = 0.0;
                    for ((freq, angle), phase) in gratings.iter().zip(&phases) {
                        let u = x * angle.cos() + y * angle.sin();
                        v += amp * (2.0 * PI * freq * u + phase).sin();
                    }
                    data[i * image_size + j] = 0.5 + 0.5 * v + 0.05 * rng.normal();
                }
            }
            let img = ImageTensor::new(image_size, image_size, 1, data)?;
            let pose = ELEMENTS[rng.below(8)];
            images.push(group::act_on_image(pose, &img)?);
            labels.push(class);
        }
    }
    Ok(Dataset { images, labels, num_classes: classes })
}

/// Loads a class-per-subdirectory image folder. Labels follow sorted
/// subdirectory names; images are center-cropped square, resized to
/// `image_size`, and scaled to [0,1]. Unreadable files are skipped with a
/// warning (count returned); a class with no readable image is a data error.
pub fn load_image_folder(
    path: &Path,
    image_size: usize,
    channels: usize,
) -> Result<(Dataset, usize)> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!(
            "folder loader supports 1 or 3 channels, got {}",
            channels
        )));
    }
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::Data(format!("cannot read dataset directory {}: {}", path.display(), e)))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Data(format!(
            "dataset directory {} needs at least 2 class subdirectories",
            path.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut warnings = 0;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::Data(format!("cannot read class directory {}: {}", dir.display(), e)))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let before = images.len();
        for file in files {
            match load_one_image(&file, image_size, channels) {
                Ok(img) => {
                    images.push(img);
                    labels.push(label);
                }
                Err(e) => {
                    eprintln!("warning: skipping {}: {}", file.display(), e);
                    warnings += 1;
                }
            }
        }
        if images.len() == before {
            return Err(Error::Data(format!(
                "class directory {} has no readable images",
                dir.display()
            )));
        }
    }
    Ok((
        Dataset { images, labels, num_classes: class_dirs.len() },
        warnings,
    ))
}

fn load_one_image(path: &Path, image_size: usize, channels: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("decode failed: {}", e)))?;
    // Center-crop to the largest square, then resize.
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let cropped = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(
        image_size as u32,
        image_size as u32,
        image::imageops::FilterType::Triangle,
    );
    let mut data = vec![0.0; image_size * image_size * channels];
    let hw = image_size * image_size;
    if channels == 1 {
        let gray = resized.to_luma8();
        for (i, px) in gray.pixels().enumerate() {
            data[i] = px.0[0] as f64 / 255.0;
        }
    } else {
        let rgb = resized.to_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * hw + i] = px.0[c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::new(image_size, image_size, channels, data)
}
