//! Pad-and-crop, horizontal flip and per-channel normalization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::Batch;

/// Per-channel normalization with the split it was computed from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    /// Where the statistics came from, e.g. `"cifar10/train"`.
    pub source: String,
}

impl Normalization {
    /// Channel means and population standard deviations of `images`.
    pub fn from_images(images: &Tensor4<f32>, source: impl Into<String>) -> Self {
        let plane = images.plane_len();
        let m = (images.n * plane) as f64;
        let mut mean = Vec::with_capacity(images.c);
        let mut std = Vec::with_capacity(images.c);
        for c in 0..images.c {
            let (mut s, mut q) = (0.0f64, 0.0f64);
            for n in 0..images.n {
                let i = images.index(n, c, 0, 0);
                for &v in &images.data()[i..i + plane] {
                    s += v as f64;
                    q += (v as f64) * (v as f64);
                }
            }
            let mu = s / m;
            mean.push(mu as f32);
            std.push(((q / m - mu * mu).max(0.0).sqrt()).max(1e-6) as f32);
        }
        Normalization { mean, std, source: source.into() }
    }

    pub fn apply(&self, images: &mut Tensor4<f32>) -> Result<()> {
        if self.mean.len() != images.c {
            return Err(Error::shape(format!("normalization for {} channels, images have {}", self.mean.len(), images.c)));
        }
        let plane = images.plane_len();
        let c = images.c;
        for (k, chunk) in images.data_mut().chunks_mut(plane).enumerate() {
            let ch = k % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub random_crop: bool,
    pub horizontal_flip: bool,
    pub normalization: Option<Normalization>,
}

impl AugmentConfig {
    /// Pad 4, random crop, random flip.
    pub fn standard(normalization: Option<Normalization>) -> Self {
        AugmentConfig { pad: 4, random_crop: true, horizontal_flip: true, normalization }
    }

    /// Normalization only.
    pub fn none(normalization: Option<Normalization>) -> Self {
        AugmentConfig { pad: 0, random_crop: false, horizontal_flip: false, normalization }
    }
}

/// Crop of the zero-padded `(c, h, w)` image at offset `(oy, ox)` in padded
/// coordinates; offset `(pad, pad)` returns the image unchanged.
pub fn pad_crop(img: &[f32], c: usize, h: usize, w: usize, pad: usize, oy: usize, ox: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - pad as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

/// Augments a training batch in place. Labels are untouched, so they stay
/// aligned with their images.
pub fn augment<R: Rng + ?Sized>(batch: &mut Batch, cfg: &AugmentConfig, rng: &mut R) -> Result<()> {
    let [_, c, h, w] = batch.images.shape();
    let len = c * h * w;
    if cfg.random_crop || cfg.horizontal_flip {
        for img in batch.images.data_mut().chunks_mut(len) {
            if cfg.random_crop {
                let oy = rng.random_range(0..=2 * cfg.pad);
                let ox = rng.random_range(0..=2 * cfg.pad);
                let cropped = pad_crop(img, c, h, w, cfg.pad, oy, ox);
                img.copy_from_slice(&cropped);
            }
            if cfg.horizontal_flip && rng.random_bool(0.5) {
                flip_horizontal(img, c, h, w);
            }
        }
    }
    if let Some(n) = &cfg.normalization {
        n.apply(&mut batch.images)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Vec<f32> {
        (0..2 * 3 * 4).map(|v| v as f32).collect()
    }

    #[test]
    fn centred_crop_is_identity() {
        assert_eq!(pad_crop(&img(), 2, 3, 4, 4, 4, 4), img());
        let shifted = pad_crop(&img(), 2, 3, 4, 1, 0, 0);
        assert_eq!(shifted[0], 0.0);
        assert_eq!(shifted[5], img()[0]);
    }

    #[test]
    fn double_flip_restores() {
        let mut v = img();
        flip_horizontal(&mut v, 2, 3, 4);
        assert_eq!(&v[..4], &[3.0, 2.0, 1.0, 0.0]);
        flip_horizontal(&mut v, 2, 3, 4);
        assert_eq!(v, img());
    }

    #[test]
    fn normalization_centres_channels() {
        let mut t = Tensor4::from_fn([4, 2, 3, 3], |n, c, y, x| (n + 2 * c + y * x) as f32 * 0.1 + c as f32);
        let norm = Normalization::from_images(&t, "test");
        norm.apply(&mut t).unwrap();
        let after = Normalization::from_images(&t, "check");
        for c in 0..2 {
            assert!(after.mean[c].abs() < 1e-5);
            assert!((after.std[c] - 1.0).abs() < 1e-4);
        }
    }
}
