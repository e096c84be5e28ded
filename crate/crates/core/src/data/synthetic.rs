//! Synthetic 2-D Gaussian blobs, stored as `N×2×1×1` images.

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// `per_class` isotropic normal samples with standard deviation `spread`
/// around each centre; class `c` is centred at `centres[c]`.
pub fn gaussian_blobs(centres: &[[f64; 2]], per_class: usize, spread: f64, rng: &mut RngState) -> Result<LabeledImageSet> {
    if centres.is_empty() || per_class == 0 {
        return Err(Error::Config("blobs need at least one centre and one sample per class".into()));
    }
    let n = centres.len() * per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, centre) in centres.iter().enumerate() {
            data.push(centre[0] + spread * rng.normal());
            data.push(centre[1] + spread * rng.normal());
            labels.push(c);
        }
    }
    let images = Tensor::new(vec![n, 2, 1, 1], data)?;
    LabeledImageSet::new(images, labels, centres.len(), format!("blobs:{}x{per_class}", centres.len()))
}

/// `count` centres evenly spaced on a circle of `radius`.
pub fn ring_centres(count: usize, radius: f64) -> Vec<[f64; 2]> {
    (0..count)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / count as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}
