//! The work behind each subcommand, callable without the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use framer_core::analysis::{self, cross_sample_matrix, CurveRow, EvalBatch};
use framer_core::backbone::{Backbone, ParamStore, Snapshot};
use framer_core::checkpoint;
use framer_core::data::{split_seed, synthetic_image, DataSource};
use framer_core::degrade::{make_pair, DegradationConfig};
use framer_core::diffusion::{condition_from_lr, from_model_space, sample, NoiseSchedule, SamplerConfig};
use framer_core::image::{list_images, Image};
use framer_core::metrics::{psnr_image, ssim};
use framer_core::spectral::{band_histogram, band_mean_log_magnitude, shared_edges, Band, BandHistogram, BandMasks};
use framer_core::train::{self, StepLog, Trainer, STREAM_PARAMS};
use framer_loss::FramerDistiller;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::{io_at, CliError, Result};

fn data_source(cfg: &ExperimentConfig, seed: u64) -> Result<DataSource> {
    match &cfg.data.dir {
        Some(dir) => DataSource::directory(dir).map_err(io_at(dir)),
        None => Ok(DataSource::Synthetic {
            size: cfg.backbone.image_size,
            seed,
        }),
    }
}

/// JSON stored in every checkpoint manifest.
pub fn run_record(cfg: &ExperimentConfig, seed: u64) -> serde_json::Value {
    serde_json::json!({ "seed": seed, "experiment": cfg })
}

pub fn build_trainer(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<Trainer> {
    Ok(Trainer::new(
        cfg.backbone.clone(),
        &cfg.schedule,
        cfg.degradation.clone(),
        cfg.optim,
        cfg.settings(seed),
        data_source(cfg, seed)?,
        out.map(Path::to_path_buf),
        run_record(cfg, seed),
    )?)
}

/// Trains per `cfg`. The distiller is always attached; with
/// `use_framer = false` it observes the taps and adds nothing.
pub fn train(cfg: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<(Trainer, Vec<StepLog>)> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
        fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(io_at(dir.join("config.toml")))?;
    }
    let mut trainer = build_trainer(cfg, seed, out)?;
    let mut distiller = FramerDistiller::new(cfg.effective_framer(), &cfg.backbone)?;
    let logs = trainer.run(Some(&mut distiller))?;
    Ok((trainer, logs))
}

/// A trained (or freshly initialized) model with its configuration.
#[derive(Debug)]
pub struct Model {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub backbone: Backbone,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn load(manifest: &Path) -> Result<Self> {
        let (m, params) = checkpoint::load(manifest)?;
        let config: ExperimentConfig = serde_json::from_value(m.config["experiment"].clone())?;
        let seed = m.config["seed"].as_u64().unwrap_or(0);
        let backbone = Backbone::new(config.backbone.clone())?;
        let schedule = NoiseSchedule::new(&config.schedule)?;
        Ok(Self {
            config,
            seed,
            backbone,
            params,
            schedule,
        })
    }

    /// Parameters drawn exactly as training would initialize them.
    pub fn untrained(config: ExperimentConfig, seed: u64) -> Result<Self> {
        let backbone = Backbone::new(config.backbone.clone())?;
        let params = backbone.init_params(&mut ChaCha8Rng::seed_from_u64(split_seed(seed, STREAM_PARAMS)));
        let schedule = NoiseSchedule::new(&config.schedule)?;
        Ok(Self {
            config,
            seed,
            backbone,
            params,
            schedule,
        })
    }

    pub fn snapshot(&self) -> Snapshot<'_> {
        Snapshot {
            backbone: &self.backbone,
            params: &self.params,
        }
    }

    pub fn degradation(&self) -> DegradationConfig {
        self.config
            .degradation
            .clone()
            .with_crop(self.config.backbone.image_size)
    }

    pub fn eval_batch(&self, seed: u64, n: usize) -> Result<EvalBatch> {
        let data = data_source(&self.config, seed)?;
        Ok(train::eval_batch(
            &data,
            &self.degradation(),
            self.config.backbone.image_size,
            seed,
            n,
        )?)
    }
}

/// Super-resolves each LR image; sample `i` uses noise seed
/// `split_seed(seed, i)`.
pub fn sample_images(
    snapshot: &Snapshot,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    lrs: &[Image],
    seed: u64,
) -> Result<Vec<Image>> {
    let size = snapshot.backbone.config().image_size;
    lrs.iter()
        .enumerate()
        .map(|(i, lr)| {
            let cond = condition_from_lr(lr, size)?;
            let z0 = sample(snapshot, &cond, schedule, sampler, split_seed(seed, i as u64))?;
            let mut img = Image::new(3, size, size, from_model_space(z0.data()))?;
            img.clamp01();
            Ok(img)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub index: usize,
    pub source: String,
    pub pair_seed: u64,
    pub hr: String,
    pub lr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradeManifest {
    pub seed: u64,
    /// SHA-256 of the JSON-encoded degradation config.
    pub config_hash: String,
    pub config: DegradationConfig,
    pub pairs: Vec<PairEntry>,
}

pub fn config_hash(config: &DegradationConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("config serializes")))
}

/// Where `degrade` reads HR images from.
#[derive(Debug, Clone)]
pub enum HrSource {
    Directory(PathBuf),
    Synthetic { count: usize, size: usize },
}

/// Writes `hr/NNNN.png`, `lr/NNNN.png` and `manifest.json` into `out`.
pub fn degrade(config: &DegradationConfig, source: &HrSource, seed: u64, out: &Path) -> Result<DegradeManifest> {
    config.validate()?;
    let inputs: Vec<(String, Image)> = match source {
        HrSource::Directory(dir) => list_images(dir)
            .map_err(io_at(dir))?
            .into_iter()
            .map(|p| Ok((p.display().to_string(), Image::load(&p)?)))
            .collect::<Result<_>>()?,
        HrSource::Synthetic { count, size } => (0..*count)
            .map(|i| (format!("synthetic:{i}"), synthetic_image(*size, seed, i as u64)))
            .collect(),
    };
    if inputs.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    for sub in ["hr", "lr"] {
        fs::create_dir_all(out.join(sub)).map_err(io_at(out.join(sub)))?;
    }
    let mut pairs = Vec::with_capacity(inputs.len());
    for (index, (name, hr)) in inputs.into_iter().enumerate() {
        let pair_seed = split_seed(seed, index as u64);
        let pair = make_pair(&hr, config, pair_seed)?;
        let (h, l) = (format!("hr/{index:04}.png"), format!("lr/{index:04}.png"));
        pair.hr.save(&out.join(&h))?;
        pair.lr.save(&out.join(&l))?;
        pairs.push(PairEntry {
            index,
            source: name,
            pair_seed,
            hr: h,
            lr: l,
        });
    }
    let manifest = DegradeManifest {
        seed,
        config_hash: config_hash(config),
        config: config.clone(),
        pairs,
    };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_at(&path))?;
    Ok(manifest)
}

pub fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, Image)>> {
    list_images(dir)
        .map_err(io_at(dir))?
        .into_iter()
        .map(|p| {
            let img = Image::load(&p)?;
            Ok((p, img))
        })
        .collect()
}

/// Spectral histogram of a set of equally sized images plus band means.
pub fn analyze_bands(images: &[Image], radius: f64, bins: usize) -> Result<BandHistogram> {
    let first = images
        .first()
        .ok_or_else(|| CliError::Usage("no input images".into()))?;
    let (h, w) = (first.height, first.width);
    if images.iter().any(|i| (i.height, i.width) != (h, w)) {
        return Err(CliError::Usage("all images must share one size".into()));
    }
    let masks = BandMasks::new(h, w, radius)?;
    let feats: Vec<_> = images.iter().map(Image::to_tensor).collect();
    let edges = shared_edges(&feats, &masks, bins, None)?;
    Ok(band_histogram(&feats, &masks, &edges)?)
}

/// Per-image `(lf, hf)` mean log-magnitudes.
pub fn band_means(images: &[Image], radius: f64) -> Result<Vec<(f64, f64)>> {
    images
        .iter()
        .map(|img| {
            let masks = BandMasks::new(img.height, img.width, radius)?;
            Ok(band_mean_log_magnitude(&img.to_tensor(), &masks)?)
        })
        .collect()
}

pub fn analyze_layers(model: &Model, seed: u64, ts: &[usize], samples: usize, radius: f64) -> Result<Vec<CurveRow>> {
    let batch = model.eval_batch(seed, samples)?;
    Ok(train::layer_curves(
        &model.snapshot(),
        &model.schedule,
        &batch,
        ts,
        radius,
        seed,
    )?)
}

/// Cross-sample band cosine matrix of one layer at timestep `t`.
pub fn analyze_batch(
    model: &Model,
    seed: u64,
    layer: usize,
    t: usize,
    band: Band,
    samples: usize,
    radius: f64,
) -> Result<Vec<Vec<f64>>> {
    let n = model.backbone.n_layers();
    if !(1..=n).contains(&layer) {
        return Err(CliError::Usage(format!("layer must lie in 1..={n}")));
    }
    let batch = model.eval_batch(seed, samples)?;
    let taps = analysis::adapted_taps(
        &model.snapshot(),
        &batch,
        &model.schedule,
        t,
        split_seed(seed, t as u64),
    )?;
    let s = model.config.backbone.image_size;
    let masks = BandMasks::new(s, s, radius)?;
    Ok(cross_sample_matrix(&taps[layer - 1], &masks, band)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR/SSIM for every file name present in both directories.
pub fn metrics(pred: &Path, reference: &Path) -> Result<Vec<MetricRow>> {
    let preds = load_dir(pred)?;
    let mut rows = Vec::new();
    for (p, img) in preds {
        let name = p.file_name().expect("listed file").to_string_lossy().to_string();
        let r = reference.join(&name);
        if !r.exists() {
            log::warn!("{name}: no reference image");
            continue;
        }
        let ref_img = Image::load(&r)?;
        rows.push(MetricRow {
            psnr: psnr_image(&img, &ref_img, 1.0)?,
            ssim: ssim(&img, &ref_img, 1.0)?,
            name,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Usage("no matching prediction/reference pairs".into()));
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("image,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.name, r.psnr, r.ssim);
    }
    let n = rows.len() as f64;
    let _ = writeln!(
        s,
        "mean,{},{}",
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n
    );
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_at(parent))?;
    }
    fs::write(path, text).map_err(io_at(path))
}
