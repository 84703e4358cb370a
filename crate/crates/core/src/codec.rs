//! Image <-> latent frame codecs.
//!
//! `LosslessRearrange` is a space-to-depth rearrangement (`H x W x 3` into
//! `3f² x H/f x W/f`) of pixel values mapped to `[-1, 1]`; it is a bijection.
//! `LearnedTiny` is a linear per-patch autoencoder fit to example frames by
//! principal component analysis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// RGB image, `H x W x 3`, values in `[0, 1]`.
pub type Image = Array3<f64>;

pub fn image_from_rgb8(img: &image::RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn image_to_rgb8(img: &Image) -> image::RgbImage {
    let (h, w, _) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Quantize to the 8-bit grid (what a PNG round trip would produce).
pub fn quantize(img: &Image) -> Image {
    img.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    LosslessRearrange,
    LearnedTiny,
}

#[derive(Debug, Clone, PartialEq)]
struct LinearPatchCodec {
    /// `latent x patch_dim`, orthonormal rows.
    basis: Array2<f64>,
    mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCodec {
    factor: usize,
    mode: CodecMode,
    learned: Option<LinearPatchCodec>,
}

impl LatentCodec {
    pub fn lossless(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(invalid("codec factor must be positive"));
        }
        Ok(Self {
            factor,
            mode: CodecMode::LosslessRearrange,
            learned: None,
        })
    }

    /// Fit a linear patch codec with `latent_channels` components to `frames`.
    pub fn fit_tiny(factor: usize, latent_channels: usize, frames: &[Image]) -> Result<Self> {
        let patch_dim = 3 * factor * factor;
        if latent_channels == 0 || latent_channels > patch_dim {
            return Err(invalid(format!(
                "learned codec needs 1..={patch_dim} latent channels"
            )));
        }
        let base = Self::lossless(factor)?;
        let mut patches: Vec<Vec<f64>> = Vec::new();
        for f in frames {
            let z = base.encode_frame(f)?;
            let (c, h, w) = z.dim();
            for i in 0..h {
                for j in 0..w {
                    patches.push((0..c).map(|k| z[[k, i, j]]).collect());
                }
            }
        }
        if patches.len() < 2 {
            return Err(invalid("need at least two patches to fit a codec"));
        }
        let n = patches.len() as f64;
        let mut mean = vec![0.0; patch_dim];
        for p in &patches {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(patch_dim, patch_dim);
        for p in &patches {
            let d = DVector::from_iterator(patch_dim, p.iter().zip(&mean).map(|(v, m)| v - m));
            cov.ger(1.0 / n, &d, &d, 1.0);
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..patch_dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = Array2::from_shape_fn((latent_channels, patch_dim), |(k, d)| {
            eig.eigenvectors[(d, order[k])]
        });
        Ok(Self {
            factor,
            mode: CodecMode::LearnedTiny,
            learned: Some(LinearPatchCodec { basis, mean }),
        })
    }

    pub fn mode(&self) -> CodecMode {
        self.mode
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        match &self.learned {
            Some(l) => l.basis.nrows(),
            None => 3 * self.factor * self.factor,
        }
    }

    fn rearrange(&self, image: &Image) -> Result<Array3<f64>> {
        let (h, w, c) = image.dim();
        let f = self.factor;
        if c != 3 {
            return Err(invalid(format!("expected 3 color channels, got {c}")));
        }
        if h % f != 0 || w % f != 0 {
            return Err(invalid(format!(
                "image {h}x{w} is not divisible by codec factor {f}"
            )));
        }
        Ok(Array3::from_shape_fn((3 * f * f, h / f, w / f), |(k, i, j)| {
            let (ch, di, dj) = (k / (f * f), (k / f) % f, k % f);
            image[[i * f + di, j * f + dj, ch]] * 2.0 - 1.0
        }))
    }

    fn unrearrange(&self, z: &Array3<f64>) -> Image {
        let (_, h, w) = z.dim();
        let f = self.factor;
        Array3::from_shape_fn((h * f, w * f, 3), |(y, x, ch)| {
            let k = ch * f * f + (y % f) * f + (x % f);
            (z[[k, y / f, x / f]] + 1.0) / 2.0
        })
    }

    pub fn encode_frame(&self, image: &Image) -> Result<Array3<f64>> {
        let z = self.rearrange(image)?;
        match &self.learned {
            None => Ok(z),
            Some(l) => {
                let (c, h, w) = z.dim();
                Ok(Array3::from_shape_fn((l.basis.nrows(), h, w), |(k, i, j)| {
                    (0..c).map(|d| l.basis[[k, d]] * (z[[d, i, j]] - l.mean[d])).sum()
                }))
            }
        }
    }

    pub fn decode_frame(&self, latent: &Array3<f64>) -> Result<Image> {
        let (c, h, w) = latent.dim();
        if c != self.latent_channels() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.latent_channels(), h, w],
                got: vec![c, h, w],
            });
        }
        match &self.learned {
            None => Ok(self.unrearrange(latent)),
            Some(l) => {
                let pd = l.basis.ncols();
                let z = Array3::from_shape_fn((pd, h, w), |(d, i, j)| {
                    l.mean[d] + (0..c).map(|k| l.basis[[k, d]] * latent[[k, i, j]]).sum::<f64>()
                });
                Ok(self.unrearrange(&z))
            }
        }
    }
}

/// Peak signal-to-noise ratio for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
