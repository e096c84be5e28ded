//! IDX (MNIST-style) images and labels.
//!
//! Images: big-endian `u32` magic `0x00000803`, then `N, H, W` as `u32`, then
//! `N·H·W` unsigned bytes. `0x00000804` with `N, C, H, W` is accepted for
//! colour exports. Labels: magic `0x00000801`, `N`, then `N` bytes.

use std::path::Path;

use super::{sha256_hex, LabeledImageSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC_3D: u32 = 0x0000_0803;
const IMAGES_MAGIC_4D: u32 = 0x0000_0804;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(at as u64, format!("truncated {what} header")))
}

struct ImageHeader {
    count: usize,
    shape: [usize; 3],
    data_at: usize,
}

fn image_header(bytes: &[u8]) -> Result<ImageHeader> {
    let magic = be_u32(bytes, 0, "images")?;
    let ndims = match magic {
        IMAGES_MAGIC_3D => 3,
        IMAGES_MAGIC_4D => 4,
        other => {
            return Err(Error::format(
                0,
                format!("images: bad magic {other:#010x}, expected 0x00000803"),
            ))
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        let d = be_u32(bytes, 4 + 4 * i, "images")? as usize;
        if d == 0 && i > 0 {
            return Err(Error::format((4 + 4 * i) as u64, "images: zero-sized dimension"));
        }
        dims.push(d);
    }
    let shape = if ndims == 3 {
        [1, dims[1], dims[2]]
    } else {
        [dims[1], dims[2], dims[3]]
    };
    Ok(ImageHeader {
        count: dims[0],
        shape,
        data_at: 4 + 4 * ndims,
    })
}

/// Decodes an image/label file pair; pixels are scaled by `1/255`.
pub fn decode_idx(images: &[u8], labels: &[u8]) -> Result<LabeledImageSet> {
    let header = image_header(images)?;
    let expected = header
        .shape
        .iter()
        .try_fold(header.count, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(header.data_at));
    if expected != Some(images.len()) {
        let expected = expected.map_or("more than usize::MAX".to_string(), |e| e.to_string());
        return Err(Error::format(
            header.data_at.min(images.len()) as u64,
            format!("images: header implies {expected} bytes, file has {}", images.len()),
        ));
    }

    let magic = be_u32(labels, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            0,
            format!("labels: bad magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let n_labels = be_u32(labels, 4, "labels")? as usize;
    if n_labels != header.count {
        return Err(Error::format(
            4,
            format!("labels: count {n_labels} does not match {} images", header.count),
        ));
    }
    if labels.len() != 8 + n_labels {
        return Err(Error::format(
            labels.len().min(8 + n_labels) as u64,
            format!("labels: expected {} bytes, file has {}", 8 + n_labels, labels.len()),
        ));
    }
    if header.count == 0 {
        return Err(Error::format(4, "images: file holds no samples"));
    }

    let pixels: Vec<f64> = images[header.data_at..].iter().map(|&b| f64::from(b) / 255.0).collect();
    let label_vec: Vec<usize> = labels[8..].iter().map(|&b| usize::from(b)).collect();
    let class_count = label_vec.iter().max().map_or(1, |m| m + 1);
    let mut shape = vec![header.count];
    shape.extend_from_slice(&header.shape);
    LabeledImageSet::new(
        Tensor::new(shape, pixels)?,
        label_vec,
        class_count,
        sha256_hex(&[images, labels]),
    )
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    decode_idx(&images, &labels)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Inverse of the image half of [`decode_idx`] for `[0, 1]` pixel data.
pub fn encode_idx_images(set: &LabeledImageSet) -> Vec<u8> {
    let shape = set.image_shape();
    let mut out = Vec::with_capacity(16 + set.images().len());
    if shape[0] == 1 {
        out.extend_from_slice(&IMAGES_MAGIC_3D.to_be_bytes());
        for d in [set.len(), shape[1], shape[2]] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        out.extend_from_slice(&IMAGES_MAGIC_4D.to_be_bytes());
        for d in [set.len(), shape[0], shape[1], shape[2]] {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    out.extend(set.images().data().iter().map(|&v| to_byte(v)));
    out
}

pub fn encode_idx_labels(set: &LabeledImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + set.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend(set.labels().iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 51, 204, 255]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 1, 7];
        (img, lab)
    }

    #[test]
    fn crafted_single_image() {
        let (img, lab) = fixture();
        let set = decode_idx(&img, &lab).unwrap();
        assert_eq!(set.images().shape(), &[1, 1, 2, 2]);
        assert_eq!(set.images().data(), &[0.0, 0.2, 0.8, 1.0]);
        assert_eq!(set.labels(), &[7]);
        assert_eq!(set.class_count(), 8);
        assert_eq!(encode_idx_images(&set), img);
        assert_eq!(encode_idx_labels(&set), lab);
    }

    #[test]
    fn count_mismatch() {
        let (img, _) = fixture();
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 7];
        assert!(matches!(decode_idx(&img, &lab), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn empty_and_truncated() {
        let (img, lab) = fixture();
        assert!(matches!(decode_idx(&[], &lab), Err(Error::Format { .. })));
        assert!(matches!(decode_idx(&img, &[]), Err(Error::Format { .. })));
        assert!(matches!(decode_idx(&img[..img.len() - 1], &lab), Err(Error::Format { .. })));
        let mut bad = img.clone();
        bad[3] = 0x02;
        assert!(matches!(decode_idx(&bad, &lab), Err(Error::Format { offset: 0, .. })));
    }
}
