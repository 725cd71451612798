//! Planar `[C, H, W]` float images and PNG/PPM file IO.

use std::path::Path;

use thiserror::Error;

use crate::resample::{self, ResizeMode};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image buffer of {got} values does not match {channels}x{height}x{width}")]
    Size {
        channels: usize,
        height: usize,
        width: usize,
        got: usize,
    },
    #[error("image io: {0}")]
    Io(#[from] ::image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != channels * height * width {
            return Err(ImageError::Size {
                channels,
                height,
                width,
                got: data.len(),
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn resize(&self, height: usize, width: usize, mode: ResizeMode) -> Image {
        let data = resample::resize_planes(&self.data, self.channels, self.height, self.width, height, width, mode);
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Top-left aligned crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let p = self.plane(c);
            for y in top..top + height {
                data.extend_from_slice(&p[y * self.width + left..y * self.width + left + width]);
            }
        }
        Image {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// Values rounded to 8-bit levels, as a file round trip would.
    pub fn quantized(&self) -> Image {
        let mut out = self.clone();
        out.data
            .iter_mut()
            .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.channels, self.height, self.width], self.data.clone()).expect("image dims are consistent")
    }

    /// Accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self, ImageError> {
        let s = t.shape();
        let (c, h, w) = match s {
            [c, h, w] | [1, c, h, w] => (*c, *h, *w),
            _ => {
                return Err(ImageError::Size {
                    channels: 0,
                    height: 0,
                    width: 0,
                    got: t.len(),
                })
            }
        };
        Image::new(c, h, w, t.data().to_vec())
    }

    /// Loads any PNG/PNM file as RGB in `[0, 1]`.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let rgb = ::image::open(path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
            }
        }
        Image::new(3, h, w, data)
    }

    /// Encodes as 8-bit; the format follows the extension (`.png`, `.ppm`).
    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.to_rgb8_bytes();
        ::image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            ::image::ExtendedColorType::Rgb8,
        )?;
        Ok(())
    }

    /// Interleaved RGB bytes; single-channel images are replicated.
    pub fn to_rgb8_bytes(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut bytes = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                let ch = if self.channels == 1 { 0 } else { c };
                bytes.push((self.data[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        bytes
    }
}

/// Image files in `dir` with a supported extension, sorted by name.
pub fn list_images(dir: &Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm" | "pnm"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_eight_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|i| (i * 7 % 256) as f64 / 255.0).collect();
        let img = Image::new(3, 4, 5, data).unwrap();
        for ext in ["png", "ppm"] {
            let path = dir.path().join(format!("x.{ext}"));
            img.save(&path).unwrap();
            let back = Image::load(&path).unwrap();
            assert_eq!(back, img.quantized());
        }
        assert_eq!(list_images(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn crop_picks_the_window() {
        let data: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let img = Image::new(1, 4, 4, data).unwrap();
        assert_eq!(img.crop(1, 2, 2, 2).data, vec![6.0, 7.0, 10.0, 11.0]);
    }
}
