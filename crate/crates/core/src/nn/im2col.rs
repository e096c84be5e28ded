//! Patch extraction for convolution-as-matmul.
//!
//! A patch is flattened channel-major, then row-major within the kernel
//! window: index `c·k·k + ki·k + kj`. Columns follow output positions in
//! row-major order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Geometry("kernel and stride must be positive".into()));
        }
        if self.height + 2 * self.padding < self.kernel || self.width + 2 * self.padding < self.kernel {
            return Err(Error::Geometry(format!(
                "{}x{} input with padding {} is smaller than kernel {}",
                self.height, self.width, self.padding, self.kernel
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn patches(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Image-space offset for patch row `r` at output position `(oy, ox)`,
    /// or `None` when it falls in the zero padding.
    fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
        let kk = self.kernel * self.kernel;
        let c = r / kk;
        let ki = (r % kk) / self.kernel;
        let kj = r % self.kernel;
        let y = (oy * self.stride + ki) as isize - self.padding as isize;
        let x = (ox * self.stride + kj) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((c * self.height + y as usize) * self.width + x as usize)
        }
    }
}

/// Packs every image in `images` (`B·C·H·W` values, batch-major) into one
/// `patch_dim × (B·patches)` matrix; image `b` owns columns
/// `b·patches .. (b+1)·patches`.
pub(crate) fn im2col_batch(images: &[f64], batch: usize, g: &ConvGeometry) -> Tensor {
    let pd = g.patch_dim();
    let np = g.patches();
    let (oh, ow) = (g.out_height(), g.out_width());
    let img_len = g.channels * g.height * g.width;
    let cols = batch * np;
    let mut out = vec![0.0; pd * cols];
    for b in 0..batch {
        let img = &images[b * img_len..(b + 1) * img_len];
        for r in 0..pd {
            let row = &mut out[r * cols + b * np..r * cols + (b + 1) * np];
            for oy in 0..oh {
                for ox in 0..ow {
                    if let Some(s) = g.source(r, oy, ox) {
                        row[oy * ow + ox] = img[s];
                    }
                }
            }
        }
    }
    Tensor::from_parts_unchecked(vec![pd, cols], out)
}

/// Adjoint of [`im2col_batch`]: scatters column gradients back to images.
pub(crate) fn col2im_batch(cols: &Tensor, batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let pd = g.patch_dim();
    let np = g.patches();
    let (oh, ow) = (g.out_height(), g.out_width());
    let img_len = g.channels * g.height * g.width;
    let ncols = batch * np;
    let cd = cols.data();
    let mut out = vec![0.0; batch * img_len];
    for b in 0..batch {
        let img = &mut out[b * img_len..(b + 1) * img_len];
        for r in 0..pd {
            let row = &cd[r * ncols + b * np..r * ncols + (b + 1) * np];
            for oy in 0..oh {
                for ox in 0..ow {
                    if let Some(s) = g.source(r, oy, ox) {
                        img[s] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
    out
}

/// Patch matrix of a single `C×H×W` image.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let &[channels, height, width] = x.shape() else {
        return Err(Error::Geometry(format!("im2col expects a C×H×W image, got {:?}", x.shape())));
    };
    let g = ConvGeometry {
        channels,
        height,
        width,
        kernel,
        stride,
        padding,
    };
    g.validate()?;
    Ok(im2col_batch(x.data(), 1, &g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::matmul;

    #[test]
    fn single_patch() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cols = im2col(&x, 2, 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 1]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_image_zero_columns() {
        let cols = im2col(&Tensor::zeros(&[2, 4, 4]), 2, 1, 1).unwrap();
        assert!(cols.data().iter().all(|&v| v == 0.0));
        assert_eq!(cols.shape(), &[8, 25]);
    }

    #[test]
    fn too_small_for_kernel() {
        assert!(matches!(
            im2col(&Tensor::zeros(&[1, 1, 1]), 2, 1, 0),
            Err(Error::Geometry(_))
        ));
    }

    fn sliding_window(img: &[f64], h: usize, w: usize, kernel: &[f64], k: usize, stride: usize) -> Vec<f64> {
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        s += kernel[i * k + j] * img[(oy * stride + i) * w + ox * stride + j];
                    }
                }
                out[oy * ow + ox] = s;
            }
        }
        out
    }

    #[test]
    fn conv_via_im2col_matches_sliding_window() {
        let mut rng = RngState::new(21);
        let img: Vec<f64> = (0..36).map(|_| rng.normal()).collect();
        let x = Tensor::new(vec![1, 6, 6], img.clone()).unwrap();
        for (k, stride) in [(2, 1), (3, 1), (2, 2), (3, 3)] {
            let kernel: Vec<f64> = (0..k * k).map(|_| rng.normal()).collect();
            let cols = im2col(&x, k, stride, 0).unwrap();
            let w = Tensor::new(vec![1, k * k], kernel.clone()).unwrap();
            let got = matmul(&w, &cols).unwrap();
            let want = sliding_window(&img, 6, 6, &kernel, k, stride);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = RngState::new(4);
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: 2,
            stride: 1,
            padding: 1,
        };
        let x: Vec<f64> = (0..2 * 2 * 5 * 4).map(|_| rng.normal()).collect();
        let cols = im2col_batch(&x, 2, &g);
        let y = Tensor::new(cols.shape().to_vec(), (0..cols.len()).map(|_| rng.normal()).collect()).unwrap();
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im_batch(&y, 2, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
