//! Two-stage Real-ESRGAN-style degradation producing LR–HR training pairs.
//!
//! Random draws happen in a fixed order so any pair can be replayed from
//! `(seed, config)`. Per stage:
//!
//! 1. blur gate; sinc gate; kernel kind; `sigma_x`, `sigma_y`, `theta`,
//!    `beta` (always drawn, even when unused); `omega_c` for sinc kernels
//! 2. resize direction (up/down/keep); scale; interpolation mode
//! 3. noise gate; Gaussian-vs-Poisson choice; its strength; one draw per value
//! 4. JPEG gate; quality
//!
//! [`make_pair`] first draws the crop offset, runs both stages, then the
//! final sinc gate (kernel size, `omega_c`) and the downscale mode.

pub mod jpeg;
pub mod kernel;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::resample::ResizeMode;

pub use jpeg::jpeg_like;
pub use kernel::{bessel_j1, build_kernel, KernelKind, KernelParams};

#[derive(Debug, Error)]
pub enum DegradeError {
    #[error("invalid degradation config: {0}")]
    Config(String),
    #[error("image {height}x{width} is smaller than the {crop}x{crop} crop")]
    TooSmall { height: usize, width: usize, crop: usize },
}

pub type Result<T> = std::result::Result<T, DegradeError>;

/// Quantization levels used by the Poisson noise model.
pub const POISSON_LEVELS: f64 = 256.0;
/// Above this rate Poisson draws use the normal approximation.
pub const POISSON_GAUSSIAN_THRESHOLD: f64 = 1.0e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub kernel_size: usize,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub kernel_types: Vec<KernelKind>,
    pub kernel_probs: Vec<f64>,
    pub betag_range: [f64; 2],
    pub betap_range: [f64; 2],
    pub sinc_prob: f64,
    /// Probabilities of up, down and keep.
    pub resize_probs: [f64; 3],
    pub resize_range: [f64; 2],
    pub resize_modes: Vec<ResizeMode>,
    pub noise_prob: f64,
    pub gauss_noise_prob: f64,
    /// In 8-bit units.
    pub gauss_sigma: [f64; 2],
    pub poisson_scale: [f64; 2],
    pub jpeg_prob: f64,
    pub jpeg_quality: [u8; 2],
}

impl StageConfig {
    pub fn first() -> Self {
        Self {
            kernel_size: 21,
            blur_prob: 1.0,
            blur_sigma: [0.2, 3.0],
            kernel_types: vec![
                KernelKind::Iso,
                KernelKind::Aniso,
                KernelKind::GeneralizedIso,
                KernelKind::GeneralizedAniso,
                KernelKind::PlateauIso,
                KernelKind::PlateauAniso,
            ],
            kernel_probs: vec![0.45, 0.25, 0.12, 0.03, 0.12, 0.03],
            betag_range: [0.5, 4.0],
            betap_range: [1.0, 2.0],
            sinc_prob: 0.1,
            resize_probs: [1.0 / 3.0; 3],
            resize_range: [0.15, 1.5],
            resize_modes: ResizeMode::ALL.to_vec(),
            noise_prob: 1.0,
            gauss_noise_prob: 0.5,
            gauss_sigma: [1.0, 30.0],
            poisson_scale: [0.05, 3.0],
            jpeg_prob: 1.0,
            jpeg_quality: [30, 95],
        }
    }

    /// Second stage; kernel types and resize probabilities mirror the first.
    pub fn second() -> Self {
        Self {
            kernel_size: 11,
            blur_sigma: [0.2, 1.5],
            resize_range: [0.3, 1.2],
            gauss_sigma: [1.0, 25.0],
            poisson_scale: [0.05, 2.5],
            ..Self::first()
        }
    }

    /// Blur, resize and noise off; JPEG at quality 100.
    pub fn neutral() -> Self {
        Self {
            blur_prob: 0.0,
            resize_probs: [0.0, 0.0, 1.0],
            noise_prob: 0.0,
            jpeg_quality: [100, 100],
            ..Self::first()
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |msg: String| Err(DegradeError::Config(format!("{name}: {msg}")));
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        for (field, p) in [
            ("blur_prob", self.blur_prob),
            ("sinc_prob", self.sinc_prob),
            ("noise_prob", self.noise_prob),
            ("gauss_noise_prob", self.gauss_noise_prob),
            ("jpeg_prob", self.jpeg_prob),
        ] {
            check_prob(name, field, p)?;
        }
        for (field, r) in [
            ("blur_sigma", self.blur_sigma),
            ("betag_range", self.betag_range),
            ("betap_range", self.betap_range),
            ("resize_range", self.resize_range),
            ("gauss_sigma", self.gauss_sigma),
            ("poisson_scale", self.poisson_scale),
        ] {
            check_range(name, field, r)?;
        }
        if self.blur_sigma[0] <= 0.0 || self.resize_range[0] <= 0.0 {
            return bad("blur_sigma and resize_range must be positive".into());
        }
        if self.jpeg_quality[0] > self.jpeg_quality[1] || self.jpeg_quality[0] < 1 || self.jpeg_quality[1] > 100 {
            return bad(format!(
                "jpeg_quality {:?} must be ordered within [1, 100]",
                self.jpeg_quality
            ));
        }
        if self.kernel_types.is_empty() || self.kernel_types.len() != self.kernel_probs.len() {
            return bad("kernel_types and kernel_probs must be non-empty and equally long".into());
        }
        if self.kernel_types.contains(&KernelKind::Sinc) {
            return bad("sinc is selected through sinc_prob, not kernel_types".into());
        }
        check_weights(name, "kernel_probs", &self.kernel_probs)?;
        check_weights(name, "resize_probs", &self.resize_probs)?;
        if self.resize_modes.is_empty() {
            return bad("resize_modes must be non-empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalConfig {
    pub sinc_prob: f64,
    /// Odd kernel sizes are drawn uniformly from this range.
    pub sinc_kernel_size: [usize; 2],
    pub crop: usize,
    pub resize_modes: Vec<ResizeMode>,
}

impl Default for FinalConfig {
    fn default() -> Self {
        Self {
            sinc_prob: 0.8,
            sinc_kernel_size: [7, 21],
            crop: 512,
            resize_modes: ResizeMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    #[serde(rename = "final")]
    pub final_stage: FinalConfig,
    pub scale: usize,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            stage1: StageConfig::first(),
            stage2: StageConfig::second(),
            final_stage: FinalConfig::default(),
            scale: 4,
        }
    }
}

impl DegradationConfig {
    /// Everything off except quality-100 JPEG per stage and a bicubic
    /// final downscale.
    pub fn neutral(crop: usize) -> Self {
        Self {
            stage1: StageConfig::neutral(),
            stage2: StageConfig::neutral(),
            final_stage: FinalConfig {
                sinc_prob: 0.0,
                crop,
                resize_modes: vec![ResizeMode::Bicubic],
                ..FinalConfig::default()
            },
            scale: 4,
        }
    }

    pub fn with_crop(mut self, crop: usize) -> Self {
        self.final_stage.crop = crop;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate("stage1")?;
        self.stage2.validate("stage2")?;
        let f = &self.final_stage;
        check_prob("final", "sinc_prob", f.sinc_prob)?;
        if f.sinc_kernel_size[0] > f.sinc_kernel_size[1] || f.sinc_kernel_size[1].is_multiple_of(2) {
            return Err(DegradeError::Config(format!(
                "final: sinc_kernel_size {:?} must be ordered with an odd upper bound",
                f.sinc_kernel_size
            )));
        }
        if f.resize_modes.is_empty() {
            return Err(DegradeError::Config("final: resize_modes must be non-empty".into()));
        }
        if self.scale == 0 || f.crop < self.scale || !f.crop.is_multiple_of(self.scale) {
            return Err(DegradeError::Config(format!(
                "crop {} must be a positive multiple of scale {}",
                f.crop, self.scale
            )));
        }
        Ok(())
    }
}

fn check_prob(stage: &str, field: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(DegradeError::Config(format!("{stage}: {field} = {p} outside [0, 1]")))
    }
}

fn check_range(stage: &str, field: &str, r: [f64; 2]) -> Result<()> {
    if r[0] <= r[1] && r[0] >= 0.0 {
        Ok(())
    } else {
        Err(DegradeError::Config(format!(
            "{stage}: {field} {r:?} is not an ordered non-negative range"
        )))
    }
}

fn check_weights(stage: &str, field: &str, w: &[f64]) -> Result<()> {
    if w.iter().all(|v| *v >= 0.0 && v.is_finite()) && w.iter().sum::<f64>() > 0.0 {
        Ok(())
    } else {
        Err(DegradeError::Config(format!(
            "{stage}: {field} must be non-negative with a positive sum"
        )))
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // still consume one draw so the stream layout does not depend on it
        let _ = rng.random::<f64>();
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Mirror index without repeating the edge sample, valid for any offset.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Convolves every channel with a square kernel, reflect padding.
pub fn filter_image(img: &Image, k: &[f64], size: usize) -> Image {
    let (h, w) = (img.height, img.width);
    let r = (size / 2) as isize;
    let mut out = img.clone();
    let n = h * w;
    for c in 0..img.channels {
        let p = img.plane(c);
        let o = &mut out.data[c * n..(c + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..size {
                    let sy = reflect(y as isize + ky as isize - r, h);
                    let row = &k[ky * size..(ky + 1) * size];
                    for (kx, kv) in row.iter().enumerate() {
                        acc += kv * p[sy * w + reflect(x as isize + kx as isize - r, w)];
                    }
                }
                o[y * w + x] = acc;
            }
        }
    }
    out
}

fn sinc_cutoff<R: Rng + ?Sized>(rng: &mut R, size: usize) -> f64 {
    if size < 13 {
        rng.random_range(PI / 3.0..PI)
    } else {
        rng.random_range(PI / 5.0..PI)
    }
}

fn draw_kernel<R: Rng + ?Sized>(stage: &StageConfig, rng: &mut R) -> Result<Vec<f64>> {
    let sinc = rng.random::<f64>() < stage.sinc_prob;
    let kind = stage.kernel_types[weighted(rng, &stage.kernel_probs)];
    let sigma_x = uniform(rng, stage.blur_sigma);
    let sigma_y = uniform(rng, stage.blur_sigma);
    let theta = rng.random_range(-PI..PI);
    let beta = match kind {
        KernelKind::PlateauIso | KernelKind::PlateauAniso => uniform(rng, stage.betap_range),
        _ => uniform(rng, stage.betag_range),
    };
    if sinc {
        let omega_c = sinc_cutoff(rng, stage.kernel_size);
        return build_kernel(KernelKind::Sinc, stage.kernel_size, &KernelParams::sinc(omega_c));
    }
    let p = KernelParams {
        sigma_x,
        sigma_y,
        theta,
        beta,
        omega_c: PI,
    };
    build_kernel(kind, stage.kernel_size, &p)
}

fn add_noise<R: Rng + ?Sized>(img: &mut Image, stage: &StageConfig, rng: &mut R) {
    if rng.random::<f64>() >= stage.noise_prob {
        return;
    }
    if rng.random::<f64>() < stage.gauss_noise_prob {
        let sigma = uniform(rng, stage.gauss_sigma) / 255.0;
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
        img.data.iter_mut().for_each(|v| *v += normal.sample(rng));
    } else {
        let scale = uniform(rng, stage.poisson_scale);
        for v in img.data.iter_mut() {
            let clean = v.clamp(0.0, 1.0);
            let lambda = clean * POISSON_LEVELS;
            let draw = if lambda <= 0.0 {
                // consume a draw so the stream layout does not depend on content
                let _ = rng.random::<f64>();
                0.0
            } else if lambda > POISSON_GAUSSIAN_THRESHOLD {
                Normal::new(lambda, lambda.sqrt()).expect("finite rate").sample(rng)
            } else {
                Poisson::new(lambda).expect("positive rate").sample(rng)
            };
            *v = clean + (draw / POISSON_LEVELS - clean) * scale;
        }
    }
}

/// One degradation stage with resizing relative to the current size.
pub fn apply_stage<R: Rng + ?Sized>(img: &Image, stage: &StageConfig, rng: &mut R) -> Result<Image> {
    apply_stage_with_base(img, stage, (img.height, img.width), rng)
}

/// One degradation stage: blur, random resize of `base`, noise, JPEG.
/// Output is clamped to `[0, 1]`.
pub fn apply_stage_with_base<R: Rng + ?Sized>(
    img: &Image,
    stage: &StageConfig,
    base: (usize, usize),
    rng: &mut R,
) -> Result<Image> {
    stage.validate("stage")?;
    let mut out = img.clone();
    if rng.random::<f64>() < stage.blur_prob {
        let k = draw_kernel(stage, rng)?;
        out = filter_image(&out, &k, stage.kernel_size);
        out.clamp01();
    }

    let direction = weighted(rng, &stage.resize_probs);
    let factor = match direction {
        0 => uniform(rng, [1.0, stage.resize_range[1].max(1.0)]),
        1 => uniform(rng, [stage.resize_range[0].min(1.0), 1.0]),
        _ => {
            let _ = rng.random::<f64>();
            1.0
        }
    };
    let mode = stage.resize_modes[rng.random_range(0..stage.resize_modes.len())];
    if direction != 2 {
        let nh = ((base.0 as f64 * factor).round() as usize).max(1);
        let nw = ((base.1 as f64 * factor).round() as usize).max(1);
        out = out.resize(nh, nw, mode);
        out.clamp01();
    }

    add_noise(&mut out, stage, rng);
    out.clamp01();

    if rng.random::<f64>() < stage.jpeg_prob {
        let q = rng.random_range(stage.jpeg_quality[0]..=stage.jpeg_quality[1]);
        out = jpeg_like(&out, q)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub hr: Image,
    pub lr: Image,
    /// `lr` upsampled back to the HR size (bicubic).
    pub lr_resized: Image,
    pub seed: u64,
}

/// Crops `hr`, runs both stages and the final sinc/downscale.
pub fn make_pair(hr: &Image, config: &DegradationConfig, seed: u64) -> Result<PairSample> {
    config.validate()?;
    let crop = config.final_stage.crop;
    if hr.height < crop || hr.width < crop {
        return Err(DegradeError::TooSmall {
            height: hr.height,
            width: hr.width,
            crop,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=hr.height - crop);
    let left = rng.random_range(0..=hr.width - crop);
    let hr = hr.crop(top, left, crop, crop);
    let lr_size = crop / config.scale;

    let x = apply_stage(&hr, &config.stage1, &mut rng)?;
    let mut x = apply_stage_with_base(&x, &config.stage2, (lr_size, lr_size), &mut rng)?;

    let f = &config.final_stage;
    if rng.random::<f64>() < f.sinc_prob {
        let lo = f.sinc_kernel_size[0].div_ceil(2).max(1) - 1;
        let hi = f.sinc_kernel_size[1] / 2;
        let size = 2 * rng.random_range(lo..=hi) + 1;
        let omega_c = sinc_cutoff(&mut rng, size);
        let k = build_kernel(KernelKind::Sinc, size, &KernelParams::sinc(omega_c))?;
        x = filter_image(&x, &k, size);
        x.clamp01();
    }
    let mode = f.resize_modes[rng.random_range(0..f.resize_modes.len())];
    let mut lr = x.resize(lr_size, lr_size, mode);
    lr.clamp01();
    let mut lr_resized = lr.resize(crop, crop, ResizeMode::Bicubic);
    lr_resized.clamp01();
    Ok(PairSample {
        hr,
        lr,
        lr_resized,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_image;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_match_the_table() {
        let c = DegradationConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage1.kernel_size, 21);
        assert_eq!(c.stage2.kernel_size, 11);
        assert_eq!(c.stage2.blur_sigma, [0.2, 1.5]);
        assert_eq!(c.final_stage.sinc_prob, 0.8);
        assert_eq!(c.scale, 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = DegradationConfig::default();
        c.stage1.kernel_size = 20;
        assert!(c.validate().is_err());
        let mut c = DegradationConfig::default();
        c.stage2.blur_sigma = [2.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = DegradationConfig::default();
        c.stage1.gauss_noise_prob = 1.5;
        assert!(c.validate().is_err());
        assert!(DegradationConfig::default().with_crop(66).validate().is_err());
    }

    #[test]
    fn sinc_kernel_preserves_constants() {
        let img = Image::filled(3, 20, 20, 0.42);
        let k = build_kernel(KernelKind::Sinc, 21, &KernelParams::sinc(1.0)).unwrap();
        let out = filter_image(&img, &k, 21);
        assert!(out.data.iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn neutral_stage_is_near_identity() {
        let img = synthetic_image(32, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = apply_stage(&img, &StageConfig::neutral(), &mut rng).unwrap();
        let dev = img
            .data
            .iter()
            .zip(&out.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 2.0 / 255.0, "{dev}");
    }

    #[test]
    fn bicubic_only_path_matches_plain_downscale() {
        let img = synthetic_image(64, 2, 0);
        let mut c = DegradationConfig::neutral(64);
        c.stage1.jpeg_prob = 0.0;
        c.stage2.jpeg_prob = 0.0;
        let pair = make_pair(&img, &c, 11).unwrap();
        let mut oracle = img.resize(16, 16, ResizeMode::Bicubic);
        oracle.clamp01();
        assert_eq!((pair.lr.height, pair.lr.width), (16, 16));
        let dev = pair
            .lr
            .data
            .iter()
            .zip(&oracle.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-6, "{dev}");
    }

    #[test]
    fn default_pairs_are_deterministic_with_exact_shapes() {
        let img = synthetic_image(80, 3, 1);
        let c = DegradationConfig::default().with_crop(64);
        let a = make_pair(&img, &c, 99).unwrap();
        let b = make_pair(&img, &c, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.lr.channels, a.lr.height, a.lr.width), (3, 16, 16));
        assert_eq!((a.lr_resized.height, a.hr.height), (64, 64));
        assert_ne!(a, make_pair(&img, &c, 100).unwrap());
    }

    #[test]
    fn small_images_are_rejected() {
        let img = synthetic_image(32, 3, 1);
        let c = DegradationConfig::default().with_crop(64);
        assert!(matches!(make_pair(&img, &c, 1), Err(DegradeError::TooSmall { .. })));
    }

    #[test]
    fn reflect_index_handles_large_offsets() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(5, 1), 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_stages_stay_in_unit_range(seed in 0u64..10_000) {
            let img = synthetic_image(24, seed, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for stage in [StageConfig::first(), StageConfig::second()] {
                let out = apply_stage(&img, &stage, &mut rng).unwrap();
                prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
