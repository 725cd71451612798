//! Pixel-space diffusion: linear noise schedule, forward noising, the
//! noise-prediction objective, and DDPM / DDIM reverse samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::resample::{resize_planes, ResizeMode};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Linear β schedule. Index `t` runs over `1..=T`; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = *config;
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(TensorError::Invalid(format!(
                "schedule needs T >= 2 and 0 < beta_start < beta_end < 1, got {config:?}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(TensorError::Invalid(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }
}

/// `z_t = √ᾱ_t z0 + √(1 − ᾱ_t) ε` for a batch sharing one timestep.
pub fn q_sample(schedule: &NoiseSchedule, z0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
    q_sample_batch(schedule, z0, &vec![t; z0.shape()[0].max(1)], noise)
}

/// Per-sample timesteps along axis 0, each in `[1, T]`.
pub fn q_sample_batch(schedule: &NoiseSchedule, z0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
    if z0.shape() != noise.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "q_sample",
            left: z0.shape().to_vec(),
            right: noise.shape().to_vec(),
        });
    }
    let b = z0.shape()[0];
    if t.len() != b {
        return Err(TensorError::Invalid(format!(
            "q_sample: {} timesteps for batch {b}",
            t.len()
        )));
    }
    let inner = z0.len() / b;
    let mut data = Vec::with_capacity(z0.len());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check(ti)?;
        let ab = schedule.alpha_bar(ti)?;
        let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        let r = i * inner..(i + 1) * inner;
        data.extend(
            z0.data()[r.clone()]
                .iter()
                .zip(&noise.data()[r])
                .map(|(z, e)| s0 * z + s1 * e),
        );
    }
    Tensor::new(z0.shape().to_vec(), data)
}

/// Mean squared error between predicted and true noise.
pub fn noise_loss(g: &mut Graph, eps_pred: Var, noise: Var) -> Result<Var> {
    g.mse(eps_pred, noise)
}

/// Anything that predicts ε from `(z_t, t, conditioning image)`.
pub trait Denoiser {
    /// `z_t`, `cond`: `[B, 3, H, W]` in model space; one timestep per sample.
    fn predict_noise(&self, z_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ddpm,
    /// Deterministic DDIM, η = 0.
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// Clamp the predicted `z0` to `[-1, 1]` at every step.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddpm,
            steps: 50,
            clip_x0: true,
        }
    }
}

/// Evenly spaced timesteps `τ_1 < … < τ_S = T`.
pub fn respaced_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (1..=steps).map(|k| (k * total / steps).max(1)).collect()
}

/// `[0, 1]` image values to model space `[-1, 1]`.
pub fn to_model_space(data: &[f64]) -> Vec<f64> {
    data.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Model space back to `[0, 1]`, clamped.
pub fn from_model_space(data: &[f64]) -> Vec<f64> {
    data.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
}

/// Bicubic resize of an LR image in `[0, 1]` to `size`, clamped and mapped
/// to model space as a `[1, 3, size, size]` conditioning tensor.
pub fn condition_from_lr(lr: &Image, size: usize) -> Result<Tensor> {
    let mut up = Image {
        channels: lr.channels,
        height: size,
        width: size,
        data: resize_planes(
            &lr.data,
            lr.channels,
            lr.height,
            lr.width,
            size,
            size,
            ResizeMode::Bicubic,
        ),
    };
    up.clamp01();
    Tensor::new([1, lr.channels, size, size], to_model_space(&up.data))
}

/// Reverse process from pure noise at the shape of `cond`. Returns `Z_0`
/// in model space; decoding is the identity.
pub fn sample(
    model: &dyn Denoiser,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Tensor> {
    if config.steps == 0 || config.steps > schedule.steps() {
        return Err(TensorError::Invalid(format!(
            "sampler steps {} outside [1, {}]",
            config.steps,
            schedule.steps()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = cond.shape().to_vec();
    let b = shape[0];
    let mut z = Tensor::randn(shape.clone(), 1.0, &mut rng);
    let taus = respaced_timesteps(schedule.steps(), config.steps);
    for k in (0..taus.len()).rev() {
        let t = taus[k];
        let t_prev = if k == 0 { 0 } else { taus[k - 1] };
        let (ab, ab_prev) = (schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?);
        let eps = model.predict_noise(&z, &vec![t; b], cond)?;
        if eps.shape() != z.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "sample",
                left: z.shape().to_vec(),
                right: eps.shape().to_vec(),
            });
        }
        let x0: Vec<f64> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(zt, e)| {
                let v = (zt - (1.0 - ab).sqrt() * e) / ab.sqrt();
                if config.clip_x0 {
                    v.clamp(-1.0, 1.0)
                } else {
                    v
                }
            })
            .collect();
        let next: Vec<f64> = match config.kind {
            SamplerKind::Ddim => {
                // ε re-derived from the (possibly clipped) x0 keeps the update consistent
                x0.iter()
                    .zip(z.data())
                    .map(|(x, zt)| {
                        let e = (zt - ab.sqrt() * x) / (1.0 - ab).sqrt();
                        ab_prev.sqrt() * x + (1.0 - ab_prev).sqrt() * e
                    })
                    .collect()
            }
            SamplerKind::Ddpm => {
                let beta_t = 1.0 - ab / ab_prev;
                let c0 = ab_prev.sqrt() * beta_t / (1.0 - ab);
                let ct = (1.0 - beta_t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                let var = beta_t * (1.0 - ab_prev) / (1.0 - ab);
                let noise = if k > 0 {
                    Some(Tensor::randn(shape.clone(), 1.0, &mut rng))
                } else {
                    None
                };
                x0.iter()
                    .zip(z.data())
                    .enumerate()
                    .map(|(i, (x, zt))| {
                        let mean = c0 * x + ct * zt;
                        match &noise {
                            Some(n) => mean + var.sqrt() * n.data()[i],
                            None => mean,
                        }
                    })
                    .collect()
            }
        };
        z = Tensor::new(shape.clone(), next)?;
    }
    Ok(z)
}
