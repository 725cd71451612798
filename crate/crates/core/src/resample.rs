//! Separable resampling of `[planes, H, W]` buffers.
//!
//! Conventions follow the usual half-pixel (`align_corners = false`) layout
//! without antialiasing: bilinear clamps source coordinates at the border,
//! bicubic uses the `a = -0.75` convolution kernel with edge replication, and
//! area is adaptive average pooling.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    Bilinear,
    Bicubic,
    Area,
}

impl ResizeMode {
    pub const ALL: [ResizeMode; 3] = [ResizeMode::Bilinear, ResizeMode::Bicubic, ResizeMode::Area];
}

type Taps = Vec<Vec<(usize, f64)>>;

fn bilinear_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            if i0 == i1 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - t), (i1, t)]
            }
        })
        .collect()
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

fn bicubic_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
            for k in -1..=2i64 {
                let idx = (base as i64 + k).clamp(0, n_in as i64 - 1) as usize;
                let wgt = cubic(t - k as f64);
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(slot) => slot.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            taps
        })
        .collect()
}

fn area_taps(n_in: usize, n_out: usize) -> Taps {
    (0..n_out)
        .map(|o| {
            let start = o * n_in / n_out;
            let end = ((o + 1) * n_in).div_ceil(n_out);
            let wgt = 1.0 / (end - start) as f64;
            (start..end).map(|i| (i, wgt)).collect()
        })
        .collect()
}

fn taps(mode: ResizeMode, n_in: usize, n_out: usize) -> Taps {
    match mode {
        ResizeMode::Bilinear => bilinear_taps(n_in, n_out),
        ResizeMode::Bicubic => bicubic_taps(n_in, n_out),
        ResizeMode::Area => area_taps(n_in, n_out),
    }
}

/// Resizes every `[H, W]` plane to `[out_h, out_w]`.
pub fn resize_planes(
    data: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Vec<f64> {
    let tx = taps(mode, w, out_w);
    let ty = taps(mode, h, out_h);
    let mut out = vec![0.0; planes * out_h * out_w];
    let mut rows = vec![0.0; h * out_w];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (x, tap) in tx.iter().enumerate() {
                rows[y * out_w + x] = tap.iter().map(|&(i, c)| c * src[y * w + i]).sum();
            }
        }
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (y, tap) in ty.iter().enumerate() {
            for &(i, c) in tap {
                for x in 0..out_w {
                    dst[y * out_w + x] += c * rows[i * out_w + x];
                }
            }
        }
    }
    out
}

/// Transpose of [`resize_planes`]: maps a gradient on the output grid back
/// onto the input grid.
pub fn resize_planes_adjoint(
    grad: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    mode: ResizeMode,
) -> Vec<f64> {
    let tx = taps(mode, w, out_w);
    let ty = taps(mode, h, out_h);
    let mut out = vec![0.0; planes * h * w];
    let mut rows = vec![0.0; h * out_w];
    for p in 0..planes {
        rows.iter_mut().for_each(|v| *v = 0.0);
        let g = &grad[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (y, tap) in ty.iter().enumerate() {
            for &(i, c) in tap {
                for x in 0..out_w {
                    rows[i * out_w + x] += c * g[y * out_w + x];
                }
            }
        }
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (x, tap) in tx.iter().enumerate() {
                let v = rows[y * out_w + x];
                for &(i, c) in tap {
                    dst[y * w + i] += c * v;
                }
            }
        }
    }
    out
}

pub fn bilinear_planes(data: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    resize_planes(data, planes, h, w, oh, ow, ResizeMode::Bilinear)
}

pub fn bilinear_planes_adjoint(grad: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    resize_planes_adjoint(grad, planes, h, w, oh, ow, ResizeMode::Bilinear)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_preserved_by_every_mode() {
        let data = vec![0.7; 2 * 5 * 7];
        for mode in ResizeMode::ALL {
            for (oh, ow) in [(10, 14), (3, 2), (5, 7), (16, 9)] {
                let out = resize_planes(&data, 2, 5, 7, oh, ow, mode);
                assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12), "{mode:?} {oh}x{ow}");
            }
        }
    }

    #[test]
    fn adjoint_matches_inner_product() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for mode in ResizeMode::ALL {
            let x: Vec<f64> = (0..2 * 6 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..2 * 4 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ax = resize_planes(&x, 2, 6, 5, 4, 9, mode);
            let aty = resize_planes_adjoint(&y, 2, 6, 5, 4, 9, mode);
            let l: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let r: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((l - r).abs() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn area_downscale_by_two_averages_blocks() {
        let data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let out = resize_planes(&data, 1, 2, 4, 1, 2, ResizeMode::Area);
        assert_eq!(out, vec![3.5, 5.5]);
    }
}
