//! 2D FFT, radial LF/HF band masks, band decomposition, band energies and
//! band-magnitude histograms.
//!
//! Masks are defined on the DC-centered spectrum. Multi-channel features are
//! transformed plane by plane and every statistic is taken over the flattened
//! set of planes, so a `[C, H, W]` feature yields one energy per band.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::tensor::Tensor;

/// Stabilizer in band-energy denominators.
pub const ENERGY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpectralError {
    #[error("radius fraction must lie in (0, 1), got {0}")]
    Radius(f64),
    #[error("feature trailing dims {feature:?} do not match mask size {mask:?}")]
    Shape { feature: Vec<usize>, mask: [usize; 2] },
    #[error("band histogram needs at least one feature")]
    EmptySet,
    #[error("bin edges must be strictly increasing with at least two entries")]
    Edges,
}

pub type Result<T> = std::result::Result<T, SpectralError>;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn transform_axis(buf: &mut [Complex64], len: usize, inverse: bool) {
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    });
    plan.process(buf);
}

fn transpose(src: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::default(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

fn fft2_complex(buf: &mut Vec<Complex64>, h: usize, w: usize, inverse: bool) {
    transform_axis(buf, w, inverse);
    let mut t = transpose(buf, h, w);
    transform_axis(&mut t, h, inverse);
    *buf = transpose(&t, w, h);
    if inverse {
        let s = 1.0 / (h * w) as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

/// Unnormalized forward transform of a real `[H, W]` plane.
pub fn fft2(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(plane.len(), h * w, "fft2: plane size");
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_complex(&mut buf, h, w, false);
    buf
}

/// Inverse transform with `1 / (H·W)` normalization.
pub fn ifft2(spectrum: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
    assert_eq!(spectrum.len(), h * w, "ifft2: spectrum size");
    let mut buf = spectrum.to_vec();
    fft2_complex(&mut buf, h, w, true);
    buf
}

/// Moves the DC bin from `(0, 0)` to `(H/2, W/2)`.
pub fn fftshift<T: Copy>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    roll(plane, h, w, h / 2, w / 2)
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Copy>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    roll(plane, h, w, h - h / 2, w - w / 2)
}

fn roll<T: Copy>(plane: &[T], h: usize, w: usize, dy: usize, dx: usize) -> Vec<T> {
    let mut out = plane.to_vec();
    for y in 0..h {
        for x in 0..w {
            out[((y + dy) % h) * w + (x + dx) % w] = plane[y * w + x];
        }
    }
    out
}

/// Real part of `ifft2(mask ⊙ fft2(plane))` for every plane; `mask` is in the
/// uncentered layout.
pub fn filter_planes(data: &[f64], planes: usize, h: usize, w: usize, mask: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for p in 0..planes {
        let mut spec = fft2(&data[p * h * w..(p + 1) * h * w], h, w);
        spec.iter_mut().zip(mask).for_each(|(s, m)| *s *= *m);
        fft2_complex(&mut spec, h, w, true);
        out.extend(spec.iter().map(|c| c.re));
    }
    out
}

/// Normalized radial distance of centered bin `(u, v)` from DC, where the
/// half-diagonal of the grid maps to 1.
pub fn normalized_radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let (ch, cw) = ((h / 2) as f64, (w / 2) as f64);
    let half_diag = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    let du = u as f64 - ch;
    let dv = v as f64 - cw;
    (du * du + dv * dv).sqrt() / half_diag
}

/// Complementary binary LF/HF masks for one spatial size.
#[derive(Debug, Clone)]
pub struct BandMasks {
    height: usize,
    width: usize,
    radius_fraction: f64,
    lf: Vec<f64>,
    hf: Vec<f64>,
    lf_uncentered: Arc<Vec<f64>>,
    hf_uncentered: Arc<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Lf,
    Hf,
}

impl Band {
    pub const BOTH: [Band; 2] = [Band::Lf, Band::Hf];

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Lf => "lf",
            Band::Hf => "hf",
        }
    }
}

impl BandMasks {
    pub fn new(height: usize, width: usize, radius_fraction: f64) -> Result<Self> {
        if !(radius_fraction > 0.0 && radius_fraction < 1.0) {
            return Err(SpectralError::Radius(radius_fraction));
        }
        let mut lf = vec![0.0; height * width];
        for u in 0..height {
            for v in 0..width {
                if normalized_radius(u, v, height, width) <= radius_fraction {
                    lf[u * width + v] = 1.0;
                }
            }
        }
        let hf: Vec<f64> = lf.iter().map(|m| 1.0 - m).collect();
        Ok(Self {
            height,
            width,
            radius_fraction,
            lf_uncentered: Arc::new(ifftshift(&lf, height, width)),
            hf_uncentered: Arc::new(ifftshift(&hf, height, width)),
            lf,
            hf,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius_fraction(&self) -> f64 {
        self.radius_fraction
    }

    /// Centered mask for `band`.
    pub fn mask(&self, band: Band) -> &[f64] {
        match band {
            Band::Lf => &self.lf,
            Band::Hf => &self.hf,
        }
    }

    /// Mask in the unshifted FFT layout, shared with graph filter nodes.
    pub fn uncentered(&self, band: Band) -> Arc<Vec<f64>> {
        match band {
            Band::Lf => self.lf_uncentered.clone(),
            Band::Hf => self.hf_uncentered.clone(),
        }
    }

    pub fn count(&self, band: Band) -> usize {
        self.mask(band).iter().filter(|&&m| m == 1.0).count()
    }

    fn planes_of(&self, shape: &[usize]) -> Result<usize> {
        let r = shape.len();
        if r < 2 || shape[r - 2] != self.height || shape[r - 1] != self.width {
            return Err(SpectralError::Shape {
                feature: shape.to_vec(),
                mask: [self.height, self.width],
            });
        }
        Ok(shape[..r - 2].iter().product())
    }
}

/// Band-split view of a feature: centered masked spectra, centered magnitudes
/// and the spatial reconstructions of each band.
#[derive(Debug, Clone)]
pub struct BandPair {
    pub shape: Vec<usize>,
    pub lf_spectrum: Vec<Complex64>,
    pub hf_spectrum: Vec<Complex64>,
    pub magnitude: Vec<f64>,
    pub lf: Vec<f64>,
    pub hf: Vec<f64>,
}

impl BandPair {
    pub fn spatial(&self, band: Band) -> &[f64] {
        match band {
            Band::Lf => &self.lf,
            Band::Hf => &self.hf,
        }
    }
}

pub fn decompose(feature: &Tensor, masks: &BandMasks) -> Result<BandPair> {
    let planes = masks.planes_of(feature.shape())?;
    let (h, w) = (masks.height, masks.width);
    let n = h * w;
    let mut pair = BandPair {
        shape: feature.shape().to_vec(),
        lf_spectrum: Vec::with_capacity(planes * n),
        hf_spectrum: Vec::with_capacity(planes * n),
        magnitude: Vec::with_capacity(planes * n),
        lf: Vec::with_capacity(planes * n),
        hf: Vec::with_capacity(planes * n),
    };
    for p in 0..planes {
        let centered = fftshift(&fft2(&feature.data()[p * n..(p + 1) * n], h, w), h, w);
        pair.magnitude.extend(centered.iter().map(|c| c.norm()));
        for (band, spec_out, spatial_out) in [
            (Band::Lf, &mut pair.lf_spectrum, &mut pair.lf),
            (Band::Hf, &mut pair.hf_spectrum, &mut pair.hf),
        ] {
            let masked: Vec<Complex64> = centered.iter().zip(masks.mask(band)).map(|(c, m)| c * *m).collect();
            let rec = ifft2(&ifftshift(&masked, h, w), h, w);
            spatial_out.extend(rec.iter().map(|c| c.re));
            spec_out.extend(masked);
        }
    }
    Ok(pair)
}

/// Spatial reconstruction of one band.
pub fn band_component(feature: &Tensor, masks: &BandMasks, band: Band) -> Result<Vec<f64>> {
    let planes = masks.planes_of(feature.shape())?;
    Ok(filter_planes(
        feature.data(),
        planes,
        masks.height,
        masks.width,
        &masks.uncentered(band),
    ))
}

fn centered_magnitudes(feature: &Tensor, masks: &BandMasks) -> Result<(usize, Vec<f64>)> {
    let planes = masks.planes_of(feature.shape())?;
    let (h, w) = (masks.height, masks.width);
    let n = h * w;
    let mut mags = Vec::with_capacity(planes * n);
    for p in 0..planes {
        let spec = fft2(&feature.data()[p * n..(p + 1) * n], h, w);
        mags.extend(fftshift(&spec, h, w).iter().map(|c| c.norm()));
    }
    Ok((planes, mags))
}

/// Mean masked spectral magnitude per band, `Σ(|F|⊙M) / (ΣM + ε)`.
pub fn band_energy(feature: &Tensor, masks: &BandMasks) -> Result<(f64, f64)> {
    let (planes, mags) = centered_magnitudes(feature, masks)?;
    let n = masks.height * masks.width;
    let energy = |band: Band| {
        let m = masks.mask(band);
        let num: f64 = mags
            .chunks(n)
            .map(|plane| plane.iter().zip(m).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        num / (planes as f64 * masks.count(band) as f64 + ENERGY_EPS)
    };
    Ok((energy(Band::Lf), energy(Band::Hf)))
}

/// `log(1 + |F|)` values of every bin inside `band`, across all planes.
pub fn band_log_magnitudes(feature: &Tensor, masks: &BandMasks, band: Band) -> Result<Vec<f64>> {
    let (_, mags) = centered_magnitudes(feature, masks)?;
    let m = masks.mask(band);
    let n = m.len();
    Ok(mags
        .iter()
        .enumerate()
        .filter(|(i, _)| m[i % n] == 1.0)
        .map(|(_, v)| v.ln_1p())
        .collect())
}

/// Mean of `log(1 + |F|)` over the LF and HF bins.
pub fn band_mean_log_magnitude(feature: &Tensor, masks: &BandMasks) -> Result<(f64, f64)> {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((
        mean(band_log_magnitudes(feature, masks, Band::Lf)?),
        mean(band_log_magnitudes(feature, masks, Band::Hf)?),
    ))
}

/// Per-bin densities over shared edges, averaged across features.
#[derive(Debug, Clone)]
pub struct BandHistogram {
    pub edges: Vec<f64>,
    pub lf_mean: Vec<f64>,
    pub lf_std: Vec<f64>,
    pub hf_mean: Vec<f64>,
    pub hf_std: Vec<f64>,
    /// Mean of `log(1 + |F|)` within each band, over all features.
    pub lf_mean_value: f64,
    pub hf_mean_value: f64,
}

impl BandHistogram {
    pub fn widths(&self) -> Vec<f64> {
        self.edges.windows(2).map(|e| e[1] - e[0]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,lf_density_mean,lf_density_std,hf_density_mean,hf_density_std\n");
        for k in 0..self.lf_mean.len() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.edges[k],
                self.edges[k + 1],
                self.lf_mean[k],
                self.lf_std[k],
                self.hf_mean[k],
                self.hf_std[k]
            );
        }
        s
    }
}

/// Evenly spaced edges spanning all `log(1 + |F|)` values of `features`. With
/// `clip_percentile` the upper edge is that percentile instead of the max;
/// values above it land in the last bin.
pub fn shared_edges(
    features: &[Tensor],
    masks: &BandMasks,
    bins: usize,
    clip_percentile: Option<f64>,
) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(SpectralError::EmptySet);
    }
    let mut all = Vec::new();
    for f in features {
        for band in Band::BOTH {
            all.extend(band_log_magnitudes(f, masks, band)?);
        }
    }
    all.sort_by(f64::total_cmp);
    let lo = all[0];
    let hi = match clip_percentile {
        Some(p) => {
            let idx = ((p / 100.0) * (all.len() - 1) as f64).round() as usize;
            all[idx.min(all.len() - 1)]
        }
        None => *all.last().unwrap(),
    };
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let bins = bins.max(1);
    Ok((0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect())
}

fn density(values: &[f64], edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let mut counts = vec![0.0; bins];
    for &v in values {
        let k = match edges.partition_point(|&e| e <= v) {
            0 => 0,
            k => (k - 1).min(bins - 1),
        };
        counts[k] += 1.0;
    }
    let n = values.len().max(1) as f64;
    counts
        .iter()
        .zip(edges.windows(2))
        .map(|(c, e)| c / (n * (e[1] - e[0])))
        .collect()
}

fn mean_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let bins = rows[0].len();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..bins).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std = (0..bins)
        .map(|k| (rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
        .collect();
    (mean, std)
}

/// Band-wise densities of `log(1 + |F|)` using common `edges` for every
/// feature. Each per-feature density integrates to one over the edges.
pub fn band_histogram(features: &[Tensor], masks: &BandMasks, edges: &[f64]) -> Result<BandHistogram> {
    if features.is_empty() {
        return Err(SpectralError::EmptySet);
    }
    if edges.len() < 2 || edges.windows(2).any(|e| e[1] <= e[0]) {
        return Err(SpectralError::Edges);
    }
    let mut lf_rows = Vec::with_capacity(features.len());
    let mut hf_rows = Vec::with_capacity(features.len());
    let (mut lf_sum, mut lf_n, mut hf_sum, mut hf_n) = (0.0, 0usize, 0.0, 0usize);
    for f in features {
        let lf = band_log_magnitudes(f, masks, Band::Lf)?;
        let hf = band_log_magnitudes(f, masks, Band::Hf)?;
        lf_sum += lf.iter().sum::<f64>();
        lf_n += lf.len();
        hf_sum += hf.iter().sum::<f64>();
        hf_n += hf.len();
        lf_rows.push(density(&lf, edges));
        hf_rows.push(density(&hf, edges));
    }
    let (lf_mean, lf_std) = mean_std(&lf_rows);
    let (hf_mean, hf_std) = mean_std(&hf_rows);
    Ok(BandHistogram {
        edges: edges.to_vec(),
        lf_mean,
        lf_std,
        hf_mean,
        hf_std,
        lf_mean_value: lf_sum / lf_n.max(1) as f64,
        hf_mean_value: hf_sum / hf_n.max(1) as f64,
    })
}
