//! Full-reference image metrics: PSNR and Gaussian-window SSIM.

use thiserror::Error;

use crate::image::Image;

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric inputs differ in shape: {left:?} vs {right:?}")]
    Shape { left: Vec<usize>, right: Vec<usize> },
    #[error("metric inputs are empty")]
    Empty,
}

/// `10 log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Shape {
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub fn psnr_image(a: &Image, b: &Image, peak: f64) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    psnr(&a.data, &b.data, peak)
}

fn check_dims(a: &Image, b: &Image) -> Result<(), MetricsError> {
    let (da, db) = (vec![a.channels, a.height, a.width], vec![b.channels, b.height, b.width]);
    if da != db {
        return Err(MetricsError::Shape { left: da, right: db });
    }
    if a.data.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over channels and over every valid window position. The window
/// is 11×11 with σ = 1.5, shrunk to the largest odd size that fits images
/// smaller than 11 pixels.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64, MetricsError> {
    check_dims(a, b)?;
    let (h, w) = (a.height, a.width);
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size, 1.5);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let (oh, ow) = (h - size + 1, w - size + 1);
    let mut total = 0.0;
    for c in 0..a.channels {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let i = (y + dy) * w + x + dx;
                        let (u, v) = (pa[i], pb[i]);
                        ma += wgt * u;
                        mb += wgt * v;
                        saa += wgt * u * u;
                        sbb += wgt * v * v;
                        sab += wgt * u * v;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (a.channels * oh * ow) as f64)
}
