//! Synthetic template classification dataset: each class is a fixed random
//! template plus Gaussian pixel noise, split 80/20 train/eval
//! deterministically per seed.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub train_idx: Vec<usize>,
    pub eval_idx: Vec<usize>,
    pub templates: Vec<Tensor>,
    pub n_classes: usize,
    pub image_size: usize,
}

/// Build the dataset: `n_per_class` images per class of shape
/// `[image_size, image_size, 3]`, image = template + Normal(0, noise_std).
pub fn synth_dataset(
    n_classes: usize,
    n_per_class: usize,
    image_size: usize,
    noise_std: f64,
    rng: &mut RngStream,
) -> Result<SynthDataset> {
    if n_classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "synth_dataset needs at least 2 classes, got {n_classes}"
        )));
    }
    if n_per_class == 0 || image_size == 0 {
        return Err(Error::InvalidConfig("empty dataset requested".into()));
    }
    let shape = [image_size, image_size, 3];
    // Templates drawn once, before any sample noise.
    let templates: Vec<Tensor> = (0..n_classes).map(|_| rng.normal_tensor(&shape)).collect();
    let mut images = Vec::with_capacity(n_classes * n_per_class);
    let mut labels = Vec::with_capacity(n_classes * n_per_class);
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    let train_per_class = (n_per_class * 4) / 5;
    for (c, template) in templates.iter().enumerate() {
        for i in 0..n_per_class {
            let mut img = template.clone();
            if noise_std > 0.0 {
                for v in img.data_mut() {
                    *v += noise_std * rng.normal();
                }
            }
            let idx = images.len();
            images.push(img);
            labels.push(c);
            if i < train_per_class {
                train_idx.push(idx);
            } else {
                eval_idx.push(idx);
            }
        }
    }
    Ok(SynthDataset {
        images,
        labels,
        train_idx,
        eval_idx,
        templates,
        n_classes,
        image_size,
    })
}

impl SynthDataset {
    /// Nearest-template classification accuracy over a split (squared l2).
    pub fn nearest_template_accuracy(&self, idx: &[usize]) -> f64 {
        let mut correct = 0usize;
        for &i in idx {
            let img = &self.images[i];
            let mut best = (f64::INFINITY, 0usize);
            for (c, t) in self.templates.iter().enumerate() {
                let d: f64 = img
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == self.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / idx.len().max(1) as f64
    }
}
