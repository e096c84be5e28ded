//! CIFAR binary batches.
//!
//! CIFAR-10 records are one label byte followed by 3072 pixel bytes (the R,
//! G and B planes of a 32×32 image, each row-major). CIFAR-100 records carry
//! a coarse and a fine label byte before the pixels; the fine label is used.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, ChannelStats, LabeledImageSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

fn decode_into(bytes: &[u8], variant: CifarVariant, pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::format(0, "empty CIFAR file"));
    }
    if !bytes.len().is_multiple_of(rec) {
        let aligned = bytes.len() - bytes.len() % rec;
        return Err(Error::format(
            aligned as u64,
            format!("file length {} is not a multiple of the {rec}-byte record", bytes.len()),
        ));
    }
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = usize::from(record[variant.label_bytes() - 1]);
        if label >= variant.class_count() {
            return Err(Error::format(
                (i * rec + variant.label_bytes() - 1) as u64,
                format!("label {label} outside {} classes", variant.class_count()),
            ));
        }
        labels.push(label);
        pixels.extend(record[variant.label_bytes()..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(())
}

pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<LabeledImageSet> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    decode_into(bytes, variant, &mut pixels, &mut labels)?;
    let images = Tensor::new(vec![labels.len(), 3, SIDE, SIDE], pixels)?;
    LabeledImageSet::new(images, labels, variant.class_count(), sha256_hex(&[bytes]))
}

/// Loads and concatenates batch files, returning the set together with its
/// per-channel statistics (compute them on the training split and reuse
/// them for test data).
pub fn load_cifar(paths: &[PathBuf], variant: CifarVariant) -> Result<(LabeledImageSet, ChannelStats)> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut blobs = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_into(&bytes, variant, &mut pixels, &mut labels).map_err(|e| match e {
            Error::Format { offset, detail } => Error::Format {
                offset,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })?;
        blobs.push(bytes);
    }
    let refs: Vec<&[u8]> = blobs.iter().map(Vec::as_slice).collect();
    let images = Tensor::new(vec![labels.len(), 3, SIDE, SIDE], pixels)?;
    let set = LabeledImageSet::new(images, labels, variant.class_count(), sha256_hex(&refs))?;
    let stats = ChannelStats::compute(&set);
    Ok((set, stats))
}

/// Writes records for a `[0, 1]`-valued 3×32×32 set. CIFAR-100 coarse labels
/// default to zero.
pub fn encode_cifar(set: &LabeledImageSet, variant: CifarVariant, coarse: Option<&[u8]>) -> Result<Vec<u8>> {
    if set.image_shape() != [3, SIDE, SIDE] {
        return Err(Error::Data(format!("CIFAR images are 3×32×32, got {:?}", set.image_shape())));
    }
    if let Some(c) = coarse {
        if c.len() != set.len() {
            return Err(Error::Data("coarse label count mismatch".into()));
        }
    }
    let mut out = Vec::with_capacity(set.len() * variant.record_len());
    for i in 0..set.len() {
        if variant == CifarVariant::Cifar100 {
            out.push(coarse.map_or(0, |c| c[i]));
        }
        out.push(set.labels()[i] as u8);
        out.extend(
            set.images().data()[i * PIXELS..(i + 1) * PIXELS]
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, coarse: Option<u8>) -> Vec<u8> {
        let mut r = Vec::new();
        if let Some(c) = coarse {
            r.push(c);
        }
        r.push(label);
        r.extend((0..PIXELS).map(|i| (i % 256) as u8));
        r
    }

    #[test]
    fn single_record_decodes_planes() {
        let bytes = record(3, None);
        let set = decode_cifar(&bytes, CifarVariant::Cifar10).unwrap();
        assert_eq!(set.labels(), &[3]);
        let d = set.images().data();
        // Pixel (row 1, col 2) of the green plane is byte 1024 + 32 + 2.
        assert_eq!(d[1024 + 34], f64::from(((1024 + 34) % 256) as u8) / 255.0);
        assert_eq!(encode_cifar(&set, CifarVariant::Cifar10, None).unwrap(), bytes);
    }

    #[test]
    fn fine_label_selected() {
        let bytes = record(42, Some(7));
        let set = decode_cifar(&bytes, CifarVariant::Cifar100).unwrap();
        assert_eq!(set.labels(), &[42]);
        assert_eq!(set.class_count(), 100);
        assert_eq!(encode_cifar(&set, CifarVariant::Cifar100, Some(&[7])).unwrap(), bytes);
    }

    #[test]
    fn misaligned_length() {
        let mut bytes = record(1, None);
        bytes.push(0);
        assert!(matches!(
            decode_cifar(&bytes, CifarVariant::Cifar10),
            Err(Error::Format { offset: 3073, .. })
        ));
        assert!(matches!(decode_cifar(&[], CifarVariant::Cifar10), Err(Error::Format { .. })));
        assert!(matches!(
            decode_cifar(&record(10, None), CifarVariant::Cifar10),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
