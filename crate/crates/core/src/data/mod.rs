//! Labeled image sets, their on-disk formats and class-incremental views.

mod cifar;
mod idx;
pub mod synthetic;
mod tasks;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cifar::{decode_cifar, encode_cifar, load_cifar, CifarVariant};
pub use idx::{decode_idx, encode_idx_images, encode_idx_labels, load_idx};
pub use tasks::{split_classes, validate_partition, ClassOrder, TaskSequence, TaskView};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Images `N×C×H×W` with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    provenance: String,
}

impl LabeledImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, provenance: String) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} outside {class_count} classes")));
        }
        Ok(LabeledImageSet {
            images,
            labels,
            class_count,
            provenance,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Digest of the source bytes.
    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one image, `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} outside {class_count} classes")));
        }
        self.class_count = class_count;
        Ok(self)
    }

    /// Images and labels at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Data("cannot gather an empty batch".into()));
        }
        let per: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range ({})", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.image_shape());
        Ok((Tensor::from_parts_unchecked(shape, data), labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledImageSet> {
        let (images, labels) = self.gather(indices)?;
        LabeledImageSet::new(images, labels, self.class_count, self.provenance.clone())
    }

    /// Splits off a seed-controlled fraction as validation; returns
    /// `(remaining, validation)`, disjoint and together covering the set.
    pub fn split_validation(&self, fraction: f64, rng: &mut RngState) -> Result<(LabeledImageSet, LabeledImageSet)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction must be in [0, 1), got {fraction}")));
        }
        let n = self.len();
        let n_val = (fraction * n as f64).round() as usize;
        if n_val == 0 {
            return Err(Error::Config("validation split is empty; use a larger fraction".into()));
        }
        let perm = rng.permutation(n);
        let mut val: Vec<usize> = perm[..n_val].to_vec();
        let mut rest: Vec<usize> = perm[n_val..].to_vec();
        val.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&rest)?, self.subset(&val)?))
    }

    pub fn normalize(&mut self, stats: &ChannelStats) -> Result<()> {
        let c = self.image_shape()[0];
        if stats.mean.len() != c {
            return Err(Error::Data(format!(
                "statistics for {} channels, images have {c}",
                stats.mean.len()
            )));
        }
        let plane: usize = self.image_shape()[1..].iter().product();
        for (k, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (k / plane) % c;
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
        self.images.ensure_finite("normalize")
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(set: &LabeledImageSet) -> ChannelStats {
        let shape = set.image_shape();
        let c = shape[0];
        let plane: usize = shape[1..].iter().product();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (k, v) in set.images.data().iter().enumerate() {
            let ch = (k / plane) % c;
            sum[ch] += v;
            sq[ch] += v * v;
        }
        let count = (set.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / count - m * m).max(0.0);
                // Constant channels are left unscaled.
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LabeledImageSet {
        let mut rng = RngState::new(3);
        let n = 20;
        let images = Tensor::new(vec![n, 3, 2, 2], (0..n * 12).map(|_| rng.uniform()).collect()).unwrap();
        LabeledImageSet::new(images, (0..n).map(|i| i % 4).collect(), 4, "toy".into()).unwrap()
    }

    #[test]
    fn normalization_centres_train_split() {
        let mut set = toy();
        let stats = ChannelStats::compute(&set);
        set.normalize(&stats).unwrap();
        let after = ChannelStats::compute(&set);
        for m in after.mean {
            assert!(m.abs() <= 1e-9);
        }
        for s in after.std {
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn validation_split_is_disjoint_cover() {
        let set = toy();
        let (rest, val) = set.split_validation(0.2, &mut RngState::new(1)).unwrap();
        assert_eq!(val.len(), 4);
        assert_eq!(rest.len() + val.len(), set.len());
        let (rest2, val2) = set.split_validation(0.2, &mut RngState::new(1)).unwrap();
        assert_eq!(rest, rest2);
        assert_eq!(val, val2);
    }

    #[test]
    fn label_bounds_checked() {
        let images = Tensor::zeros(&[2, 1, 1, 1]);
        assert!(LabeledImageSet::new(images.clone(), vec![0, 3], 3, String::new()).is_err());
        assert!(LabeledImageSet::new(images, vec![0], 3, String::new()).is_err());
    }
}
