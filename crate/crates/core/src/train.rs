//! Training loop: degrade, noise, forward with taps, noise loss plus an
//! optional distillation term, Adam step, JSONL logs and checkpoints.
//!
//! The distillation term is supplied through [`Distiller`], so this crate
//! trains a plain denoiser on its own. Every random draw comes from a
//! stream derived from `(seed, purpose, step)`, which keeps the batch and
//! noise sequence independent of whatever the distiller consumes.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError, CurveRow, EvalBatch};
use crate::backbone::{Backbone, BackboneConfig, Bound, FeatureTap, ParamStore, Snapshot};
use crate::checkpoint::{self, CheckpointError};
use crate::data::{split_seed, synthetic_image, DataSource};
use crate::degrade::{make_pair, DegradationConfig, DegradeError};
use crate::diffusion::{noise_loss, q_sample_batch, to_model_space, NoiseSchedule, ScheduleConfig};
use crate::image::{Image, ImageError};
use crate::optim::{Adam, AdamConfig};
use crate::spectral::BandMasks;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const STREAM_PARAMS: u64 = 0;
pub const STREAM_BATCH: u64 = 1;
pub const STREAM_DISTILL: u64 = 2;
pub const STREAM_EVAL: u64 = 3;

/// Timesteps of the layer-curve diagnostics.
pub const CURVE_TIMESTEPS: [usize; 2] = [300, 700];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Spectral(#[from] crate::spectral::SpectralError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("data source is empty")]
    EmptyData,
    #[error("non-finite {what} at step {step}; last good checkpoint kept")]
    NonFinite { step: u64, what: String },
    #[error("distillation failed: {0}")]
    Distill(Box<dyn std::error::Error + Send + Sync>),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Batch-averaged diagnostics of one student layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub i: usize,
    pub intra: f64,
    pub inter: f64,
    pub w_lf: f64,
    pub w_hf: f64,
    pub a_lf: f64,
    pub a_hf: f64,
    pub framer: f64,
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub noise: f64,
    pub per_layer: Vec<LayerRecord>,
    pub total: f64,
}

/// What a distiller sees after the forward pass.
pub struct DistillContext<'a, 'p> {
    pub backbone: &'a Backbone,
    pub params: &'a Bound<'p>,
    pub taps: &'a [FeatureTap],
    pub step: u64,
    /// Value of the noise-prediction loss for this batch.
    pub noise_loss: f64,
    /// Per-step stream, separate from batch sampling.
    pub rng: &'a mut ChaCha8Rng,
}

pub struct DistillOutput {
    /// Term added to the noise loss; `None` leaves the objective unchanged.
    pub loss: Option<Var>,
    pub per_layer: Vec<LayerRecord>,
}

/// An auxiliary training objective computed from the feature taps.
pub trait Distiller {
    fn distill(
        &mut self,
        g: &mut Graph,
        ctx: DistillContext<'_, '_>,
    ) -> std::result::Result<DistillOutput, Box<dyn std::error::Error + Send + Sync>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Checkpoint every K steps (0: only at the end).
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    /// Samples in the held-out evaluation set.
    pub eval_samples: usize,
    /// Mask radius fraction for the diagnostics.
    pub radius: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 200,
            seed: 0,
            checkpoint_every: 100,
            keep_checkpoints: 2,
            eval_samples: 100,
            radius: 0.2,
        }
    }
}

/// A ready batch: clean targets, conditioning, timesteps and noise.
#[derive(Debug, Clone)]
pub struct Batch {
    pub z0: Tensor,
    pub cond: Tensor,
    pub t: Vec<usize>,
    pub noise: Tensor,
}

#[derive(Debug)]
pub struct Trainer {
    backbone: Backbone,
    params: ParamStore,
    optimizer: Adam,
    schedule: NoiseSchedule,
    degradation: DegradationConfig,
    data: DataSource,
    settings: TrainSettings,
    out_dir: Option<PathBuf>,
    run_config: serde_json::Value,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backbone: BackboneConfig,
        schedule: &ScheduleConfig,
        degradation: DegradationConfig,
        adam: AdamConfig,
        settings: TrainSettings,
        data: DataSource,
        out_dir: Option<PathBuf>,
        run_config: serde_json::Value,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let degradation = degradation.with_crop(backbone.image_size);
        degradation.validate()?;
        if settings.batch_size == 0 {
            return Err(TensorError::Invalid("batch_size must be positive".into()).into());
        }
        let backbone = Backbone::new(backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(settings.seed, STREAM_PARAMS));
        let params = backbone.init_params(&mut rng);
        let optimizer = Adam::new(adam, params.tensors());
        Ok(Self {
            backbone,
            params,
            optimizer,
            schedule: NoiseSchedule::new(schedule)?,
            degradation,
            data,
            settings,
            out_dir,
            run_config,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn data(&self) -> &DataSource {
        &self.data
    }

    /// Degradation settings with the crop fixed to the model size.
    pub fn degradation(&self) -> &DegradationConfig {
        &self.degradation
    }

    pub fn snapshot(&self) -> Snapshot<'_> {
        Snapshot {
            backbone: &self.backbone,
            params: &self.params,
        }
    }

    /// The deterministic batch for `step` (1-based).
    pub fn batch(&self, step: u64) -> Result<Batch> {
        let b = self.settings.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(split_seed(self.settings.seed, STREAM_BATCH), step));
        let s = self.backbone.config().image_size;
        let mut z0 = Vec::with_capacity(b * 3 * s * s);
        let mut cond = Vec::with_capacity(b * 3 * s * s);
        for k in 0..b as u64 {
            let hr = self.data.get((step - 1) * b as u64 + k)?;
            let pair = make_pair(&hr, &self.degradation, rng.random())?;
            z0.extend(to_model_space(&pair.hr.data));
            cond.extend(to_model_space(&pair.lr_resized.data));
        }
        let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let noise = Tensor::randn([b, 3, s, s], 1.0, &mut rng);
        Ok(Batch {
            z0: Tensor::new([b, 3, s, s], z0)?,
            cond: Tensor::new([b, 3, s, s], cond)?,
            t,
            noise,
        })
    }

    /// One optimization step; parameters are only updated when every logged
    /// quantity and gradient is finite.
    pub fn step(&mut self, step: u64, distiller: Option<&mut dyn Distiller>) -> Result<StepLog> {
        let batch = self.batch(step)?;
        let z_t = q_sample_batch(&self.schedule, &batch.z0, &batch.t, &batch.noise)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, true);
        let z = g.constant(z_t);
        let c = g.constant(batch.cond);
        let out = self
            .backbone
            .forward(&mut g, &p, z, &batch.t, c, None, distiller.is_some())?;
        let target = g.constant(batch.noise);
        let noise = noise_loss(&mut g, out.eps, target)?;
        let noise_value = g.value(noise).item();

        let (mut loss, mut per_layer) = (noise, Vec::new());
        if let Some(d) = distiller {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(split_seed(self.settings.seed, STREAM_DISTILL), step));
            let res = d
                .distill(
                    &mut g,
                    DistillContext {
                        backbone: &self.backbone,
                        params: &p,
                        taps: &out.taps,
                        step,
                        noise_loss: noise_value,
                        rng: &mut rng,
                    },
                )
                .map_err(TrainError::Distill)?;
            if let Some(extra) = res.loss {
                loss = g.add(noise, extra)?;
            }
            per_layer = res.per_layer;
        }
        let total = g.value(loss).item();
        if !noise_value.is_finite() || !total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "loss".into(),
            });
        }
        g.backward(loss)?;
        let grads: Vec<Tensor> = p.vars().iter().map(|&v| g.grad(v)).collect();
        if let Some((name, _)) = self.params.names().iter().zip(&grads).find(|(_, gr)| !gr.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                what: format!("gradient of {name}"),
            });
        }
        drop(p);
        self.optimizer.step(self.params.tensors_mut(), &grads)?;
        Ok(StepLog {
            step,
            noise: noise_value,
            per_layer,
            total,
        })
    }

    fn checkpoint_dir(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("checkpoints"))
    }

    pub fn save_checkpoint(&self, step: u64) -> Result<Option<PathBuf>> {
        let Some(dir) = self.checkpoint_dir() else {
            return Ok(None);
        };
        let path = checkpoint::save(&dir, step, self.run_config.clone(), &self.params)?;
        checkpoint::prune(&dir, self.settings.keep_checkpoints.max(1))?;
        Ok(Some(path))
    }

    /// Runs all configured steps, writing `losses.jsonl`, checkpoints and
    /// `layer_curves.csv` when an output directory is set.
    pub fn run(&mut self, mut distiller: Option<&mut dyn Distiller>) -> Result<Vec<StepLog>> {
        let mut log_file = match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(std::io::BufWriter::new(fs::File::create(dir.join("losses.jsonl"))?))
            }
            None => None,
        };
        let mut logs = Vec::with_capacity(self.settings.steps as usize);
        for step in 1..=self.settings.steps {
            let entry = match &mut distiller {
                Some(d) => self.step(step, Some(&mut **d)),
                None => self.step(step, None),
            };
            let entry = match entry {
                Ok(e) => e,
                Err(e) => {
                    if let Some(f) = &mut log_file {
                        f.flush()?;
                    }
                    log::error!("aborting: {e}");
                    return Err(e);
                }
            };
            if let Some(f) = &mut log_file {
                serde_json::to_writer(&mut *f, &entry).map_err(std::io::Error::other)?;
                f.write_all(b"\n")?;
            }
            if step % 50 == 0 || step == 1 {
                log::info!("step {step}: noise {:.5} total {:.5}", entry.noise, entry.total);
            }
            let every = self.settings.checkpoint_every;
            if (every > 0 && step % every == 0) || step == self.settings.steps {
                self.save_checkpoint(step)?;
            }
            logs.push(entry);
        }
        if let Some(mut f) = log_file {
            f.flush()?;
        }
        if let Some(dir) = self.out_dir.clone() {
            if self.settings.eval_samples > 0 {
                let rows = self.layer_curves()?;
                fs::write(dir.join("layer_curves.csv"), analysis::curves_to_csv(&rows))?;
            }
        }
        Ok(logs)
    }

    pub fn eval_batch(&self, n: usize) -> Result<EvalBatch> {
        eval_batch(
            &self.data,
            &self.degradation,
            self.backbone.config().image_size,
            self.settings.seed,
            n,
        )
    }

    /// Layer cosine curves at [`CURVE_TIMESTEPS`] over the evaluation set.
    pub fn layer_curves(&self) -> Result<Vec<CurveRow>> {
        let batch = self.eval_batch(self.settings.eval_samples)?;
        layer_curves(
            &self.snapshot(),
            &self.schedule,
            &batch,
            &CURVE_TIMESTEPS,
            self.settings.radius,
            self.settings.seed,
        )
    }
}

/// High-resolution images of the held-out evaluation set: fresh synthetic
/// images from a separate stream, or the first `n` files of a directory.
pub fn eval_images(data: &DataSource, image_size: usize, seed: u64, n: usize) -> Result<Vec<Image>> {
    let stream = split_seed(seed, STREAM_EVAL);
    (0..n as u64)
        .map(|i| match data {
            DataSource::Synthetic { size, .. } => Ok(synthetic_image((*size).max(image_size), stream, i)),
            DataSource::Directory { .. } => Ok(data.get(i)?),
        })
        .collect()
}

/// Degraded evaluation pairs in model space. `degradation` is used as
/// given; its crop should match the model size.
pub fn eval_batch(
    data: &DataSource,
    degradation: &DegradationConfig,
    image_size: usize,
    seed: u64,
    n: usize,
) -> Result<EvalBatch> {
    let imgs = eval_images(data, image_size, seed, n)?;
    let pairs = analysis::degrade_all(&imgs, degradation, split_seed(seed, STREAM_EVAL))?;
    Ok(EvalBatch::from_pairs(&pairs)?)
}

/// Layer cosine curves of `snapshot` at each timestep in `ts`.
pub fn layer_curves(
    snapshot: &Snapshot,
    schedule: &NoiseSchedule,
    batch: &EvalBatch,
    ts: &[usize],
    radius: f64,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    let s = snapshot.backbone.config().image_size;
    let masks = BandMasks::new(s, s, radius)?;
    let mut rows = Vec::new();
    for &t in ts {
        rows.extend(analysis::layer_cosine_curve(
            snapshot,
            batch,
            schedule,
            t,
            &masks,
            split_seed(seed, STREAM_EVAL + t as u64),
            25,
        )?);
    }
    Ok(rows)
}
