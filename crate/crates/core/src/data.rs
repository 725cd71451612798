//! Training images: a synthetic natural-image-like generator (1/f fields plus
//! geometric shapes) and a directory loader.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use crate::image::{list_images, Image, ImageError};
use crate::spectral::ifft2;

/// Real random field with amplitude spectrum `1 / f^exponent`, scaled to
/// zero mean and unit standard deviation.
pub fn power_law_field<R: Rng + ?Sized>(h: usize, w: usize, exponent: f64, rng: &mut R) -> Vec<f64> {
    let mut spec = vec![Complex64::default(); h * w];
    for u in 0..h {
        for v in 0..w {
            if u == 0 && v == 0 {
                continue;
            }
            let fu = if u > h / 2 { u as f64 - h as f64 } else { u as f64 };
            let fv = if v > w / 2 { v as f64 - w as f64 } else { v as f64 };
            let f = (fu * fu + fv * fv).sqrt();
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            spec[u * w + v] = Complex64::from_polar(f.powf(-exponent), phase);
        }
    }
    let mut field: Vec<f64> = ifft2(&spec, h, w).into_iter().map(|c| c.re).collect();
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    field.iter_mut().for_each(|v| *v = (*v - mean) / std);
    field
}

/// Independent child seed for stream `index` of `seed` (SplitMix64 finalizer).
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic RGB image in `[0, 1]` for `(seed, index)`.
pub fn synthetic_image(size: usize, seed: u64, index: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, index));
    let n = size * size;
    let exponent = rng.random_range(0.9..1.4);
    let luma = power_law_field(size, size, exponent, &mut rng);
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        let tint = power_law_field(size, size, exponent + 0.3, &mut rng);
        let gain = rng.random_range(0.08..0.16);
        let offset = rng.random_range(0.35..0.65);
        for i in 0..n {
            data[c * n + i] = offset + gain * (luma[i] + 0.4 * tint[i]);
        }
    }
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let cy = rng.random_range(0.0..size as f64);
        let cx = rng.random_range(0.0..size as f64);
        let ry = rng.random_range(size as f64 * 0.1..size as f64 * 0.35);
        let rx = rng.random_range(size as f64 * 0.1..size as f64 * 0.35);
        let disk = rng.random_bool(0.5);
        let alpha = rng.random_range(0.5..0.9);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = if disk {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for (c, col) in color.iter().enumerate() {
                        let v = &mut data[c * n + y * size + x];
                        *v = (1.0 - alpha) * *v + alpha * col;
                    }
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Image {
        channels: 3,
        height: size,
        width: size,
        data,
    }
}

/// Where high-resolution training images come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic { size: usize, seed: u64 },
    Directory { images: Vec<PathBuf> },
}

impl DataSource {
    pub fn directory(dir: &Path) -> std::io::Result<Self> {
        Ok(DataSource::Directory {
            images: list_images(dir)?,
        })
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, DataSource::Directory { images } if images.is_empty())
    }

    /// The `index`-th image; directories cycle.
    pub fn get(&self, index: u64) -> Result<Image, ImageError> {
        match self {
            DataSource::Synthetic { size, seed } => Ok(synthetic_image(*size, *seed, index)),
            DataSource::Directory { images } => Image::load(&images[(index % images.len() as u64) as usize]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_images_are_deterministic_and_in_range() {
        let a = synthetic_image(32, 5, 3);
        let b = synthetic_image(32, 5, 3);
        assert_eq!(a, b);
        assert_ne!(a, synthetic_image(32, 5, 4));
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
