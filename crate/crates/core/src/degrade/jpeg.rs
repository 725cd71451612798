//! JPEG-like compression: 8×8 block DCT with the standard luminance
//! quantization table, applied independently to every channel.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::image::Image;

use super::DegradeError;

/// IJG luminance table, row-major.
pub const LUMA_TABLE: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance table scaled by `quality` with the IJG formula.
pub fn quant_table(quality: u8) -> Result<[f64; 64], DegradeError> {
    if !(1..=100).contains(&quality) {
        return Err(DegradeError::Config(format!("jpeg quality {quality} outside [1, 100]")));
    }
    let q = quality as f64;
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, base) in t.iter_mut().zip(LUMA_TABLE) {
        *o = ((base * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    Ok(t)
}

/// Orthonormal DCT-II basis, `basis[u * 8 + x]`.
fn basis() -> &'static [f64; 64] {
    static B: OnceLock<[f64; 64]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [0.0; 64];
        for u in 0..8 {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for x in 0..8 {
                b[u * 8 + x] = c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u * 8 + x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v * 8 + y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| b[v * 8 + y] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| b[u * 8 + x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// Runs every 8×8 block of a plane (edge-replicated to a multiple of 8)
/// through DCT, `map` on the coefficients, and inverse DCT.
fn blockwise(plane: &[f64], h: usize, w: usize, mut map: impl FnMut(&mut [f64; 64])) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                    block[y * 8 + x] = plane[sy * w + sx];
                }
            }
            let mut coef = dct8x8(&block);
            map(&mut coef);
            let rec = idct8x8(&coef);
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    out[(by + y) * w + bx + x] = rec[y * 8 + x];
                }
            }
        }
    }
    out
}

/// Block DCT round trip with coefficient quantization by `table`; pixel
/// values stay in the caller's units and are not rounded.
pub fn quantize_planes(img: &Image, table: &[f64; 64], round: bool) -> Image {
    let mut out = img.clone();
    let n = img.height * img.width;
    for c in 0..img.channels {
        let rec = blockwise(img.plane(c), img.height, img.width, |coef| {
            for (k, t) in coef.iter_mut().zip(table) {
                *k = if round { (*k / t).round() * t } else { *k / t * t };
            }
        });
        out.data[c * n..(c + 1) * n].copy_from_slice(&rec);
    }
    out
}

/// Compresses an image in `[0, 1]`: 8-bit input levels, level shift,
/// quantization at `quality`, reconstruction rounded back to 8 bits.
pub fn jpeg_like(img: &Image, quality: u8) -> Result<Image, DegradeError> {
    let table = quant_table(quality)?;
    let mut levels = img.clone();
    levels
        .data
        .iter_mut()
        .for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() - 128.0);
    let mut out = quantize_planes(&levels, &table, true);
    out.data
        .iter_mut()
        .for_each(|v| *v = ((*v + 128.0).round().clamp(0.0, 255.0)) / 255.0);
    Ok(out)
}
