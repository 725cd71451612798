//! Spectral diagnostics: layer-wise LF/HF cosine curves against the final
//! layer and cross-sample similarity matrices.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::Snapshot;
use crate::degrade::{make_pair, DegradationConfig, DegradeError, PairSample};
use crate::diffusion::{q_sample, to_model_space, NoiseSchedule};
use crate::spectral::{band_component, Band, BandMasks, SpectralError};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Cosine of two flattened vectors; identical inputs give exactly 1 and a
/// zero-norm input gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b && a.iter().any(|v| *v != 0.0) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Clean images and their conditioning, both `[B, 3, S, S]` in model space.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    pub z0: Tensor,
    pub cond: Tensor,
}

impl EvalBatch {
    pub fn from_pairs(pairs: &[PairSample]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| AnalysisError::Invalid("evaluation batch is empty".into()))?;
        let (c, s) = (first.hr.channels, first.hr.height);
        let mut z0 = Vec::with_capacity(pairs.len() * c * s * s);
        let mut cond = Vec::with_capacity(z0.capacity());
        for p in pairs {
            z0.extend(to_model_space(&p.hr.data));
            cond.extend(to_model_space(&p.lr_resized.data));
        }
        Ok(Self {
            z0: Tensor::new([pairs.len(), c, s, s], z0)?,
            cond: Tensor::new([pairs.len(), c, s, s], cond)?,
        })
    }

    pub fn len(&self) -> usize {
        self.z0.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Samples `range` of the batch as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let inner = self.z0.len() / self.len();
        let mut shape = self.z0.shape().to_vec();
        shape[0] = end - start;
        Ok(Self {
            z0: Tensor::new(shape.clone(), self.z0.data()[start * inner..end * inner].to_vec())?,
            cond: Tensor::new(shape, self.cond.data()[start * inner..end * inner].to_vec())?,
        })
    }
}

/// Degraded pairs for `images`, with per-image seeds split from `seed`.
pub fn degrade_all(images: &[crate::image::Image], config: &DegradationConfig, seed: u64) -> Result<Vec<PairSample>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| Ok(make_pair(img, config, crate::data::split_seed(seed, i as u64))?))
        .collect()
}

/// Runs the frozen model at timestep `t` and returns every tap adapted to
/// the final layer's shape, each `[B, C, H, W]`.
pub fn adapted_taps(
    snapshot: &Snapshot,
    batch: &EvalBatch,
    schedule: &NoiseSchedule,
    t: usize,
    noise_seed: u64,
) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = Tensor::randn(batch.z0.shape().to_vec(), 1.0, &mut rng);
    let z_t = q_sample(schedule, &batch.z0, t, &noise)?;
    let mut g = Graph::new();
    let p = snapshot.params.bind(&mut g, false);
    let (z, c) = (g.constant(z_t), g.constant(batch.cond.clone()));
    let ts = vec![t; batch.len()];
    let out = snapshot.backbone.forward(&mut g, &p, z, &ts, c, None, true)?;
    let mut feats = Vec::with_capacity(out.taps.len());
    for tap in &out.taps {
        let v = snapshot.backbone.adapt_tap(&mut g, &p, tap)?;
        feats.push(g.value(v).clone());
    }
    Ok(feats)
}

fn sample_view(t: &Tensor, b: usize) -> Result<Tensor> {
    let inner = t.len() / t.shape()[0];
    Ok(Tensor::new(
        t.shape()[1..].to_vec(),
        t.data()[b * inner..(b + 1) * inner].to_vec(),
    )?)
}

/// Per-layer `(cos_lf, cos_hf)` against the last entry of `taps`, averaged
/// over the batch axis.
pub fn layer_cosines(taps: &[Tensor], masks: &BandMasks) -> Result<Vec<(f64, f64)>> {
    let teacher = taps.last().ok_or_else(|| AnalysisError::Invalid("no taps".into()))?;
    let b = teacher.shape()[0];
    let mut teacher_bands = Vec::with_capacity(b);
    for s in 0..b {
        let f = sample_view(teacher, s)?;
        teacher_bands.push((
            band_component(&f, masks, Band::Lf)?,
            band_component(&f, masks, Band::Hf)?,
        ));
    }
    let mut rows = Vec::with_capacity(taps.len());
    for tap in taps {
        if tap.shape() != teacher.shape() {
            return Err(AnalysisError::Invalid(format!(
                "tap {:?} not adapted to teacher {:?}",
                tap.shape(),
                teacher.shape()
            )));
        }
        let (mut lf, mut hf) = (0.0, 0.0);
        for (s, (tl, th)) in teacher_bands.iter().enumerate() {
            let f = sample_view(tap, s)?;
            lf += cosine(&band_component(&f, masks, Band::Lf)?, tl);
            hf += cosine(&band_component(&f, masks, Band::Hf)?, th);
        }
        rows.push((lf / b as f64, hf / b as f64));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub t: usize,
    pub layer: usize,
    pub depth: f64,
    pub cos_lf: f64,
    pub cos_hf: f64,
}

/// Layer-wise LF/HF cosine of adapted features against the final layer at
/// timestep `t`. The batch is processed in chunks of `chunk` samples and
/// the per-sample cosines are averaged.
pub fn layer_cosine_curve(
    snapshot: &Snapshot,
    batch: &EvalBatch,
    schedule: &NoiseSchedule,
    t: usize,
    masks: &BandMasks,
    noise_seed: u64,
    chunk: usize,
) -> Result<Vec<CurveRow>> {
    let n = snapshot.backbone.n_layers();
    let mut sums = vec![(0.0, 0.0); n];
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < batch.len() {
        let end = (start + chunk).min(batch.len());
        let part = batch.slice(start, end)?;
        let taps = adapted_taps(
            snapshot,
            &part,
            schedule,
            t,
            crate::data::split_seed(noise_seed, start as u64),
        )?;
        for (acc, (lf, hf)) in sums.iter_mut().zip(layer_cosines(&taps, masks)?) {
            acc.0 += lf * (end - start) as f64;
            acc.1 += hf * (end - start) as f64;
        }
        start = end;
    }
    let total = batch.len() as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (lf, hf))| CurveRow {
            t,
            layer: i + 1,
            depth: (i + 1) as f64 / n as f64,
            cos_lf: lf / total,
            cos_hf: hf / total,
        })
        .collect())
}

/// Mean HF (or LF) cosine over rows with depth in `[lo, hi]`.
pub fn mean_in_depth(rows: &[CurveRow], band: Band, lo: f64, hi: f64) -> f64 {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.depth >= lo - 1e-12 && r.depth <= hi + 1e-12)
        .map(|r| match band {
            Band::Lf => r.cos_lf,
            Band::Hf => r.cos_hf,
        })
        .collect();
    if sel.is_empty() {
        return f64::NAN;
    }
    sel.iter().sum::<f64>() / sel.len() as f64
}

pub fn curves_to_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("t,depth,cos_lf,cos_hf\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.t, r.depth, r.cos_lf, r.cos_hf);
    }
    s
}

/// `[B, B]` cosines between the band components of every pair of samples
/// of one layer's `[B, C, H, W]` features.
pub fn cross_sample_matrix(features: &Tensor, masks: &BandMasks, band: Band) -> Result<Vec<Vec<f64>>> {
    let b = *features
        .shape()
        .first()
        .ok_or_else(|| AnalysisError::Invalid("empty feature".into()))?;
    if b < 2 || features.shape().len() < 3 {
        return Err(AnalysisError::Invalid(format!(
            "cross-sample matrix needs a batch of at least 2, got shape {:?}",
            features.shape()
        )));
    }
    let comps: Vec<Vec<f64>> = (0..b)
        .map(|s| Ok(band_component(&sample_view(features, s)?, masks, band)?))
        .collect::<Result<_>>()?;
    let mut m = vec![vec![0.0; b]; b];
    for i in 0..b {
        m[i][i] = 1.0;
        for j in i + 1..b {
            let c = cosine(&comps[i], &comps[j]);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let b = m.len();
    let mut s = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (b * (b - 1)) as f64
}

pub fn matrix_to_csv(m: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for row in m {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}
