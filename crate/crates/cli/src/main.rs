use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use framer_cli::ablation::{self, Suite};
use framer_cli::commands::{self, HrSource, Model};
use framer_cli::config::ExperimentConfig;
use framer_cli::{CliError, Result};
use framer_core::analysis::{curves_to_csv, matrix_to_csv, mean_off_diagonal};
use framer_core::diffusion::SamplerKind;
use framer_core::image::Image;
use framer_core::spectral::Band;
use framer_core::train::CURVE_TIMESTEPS;

#[derive(Parser)]
#[command(
    name = "framer",
    version,
    about = "Frequency-aligned self-distillation for toy diffusion super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set framer.use_faw=false` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut sets = self.sets.clone();
        sets.extend_from_slice(extra);
        ExperimentConfig::load(self.config.as_deref(), &sets)
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Checkpoint manifest (`ckpt-*.json`); without it an untrained model
    /// is built from the config and seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

impl ModelArgs {
    fn model(&self, seed: u64) -> Result<Model> {
        match &self.checkpoint {
            Some(p) => Model::load(p),
            None => Model::untrained(self.config.load(&[])?, seed),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BandArg {
    Lf,
    Hf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddpm,
    Ddim,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes config.toml, losses.jsonl, checkpoints and layer_curves.csv.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Train on the noise loss only.
        #[arg(long)]
        no_framer: bool,
    },
    /// Build degraded HR/LR pairs with a manifest.
    Degrade {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Directory of HR images.
        #[arg(long = "in", conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        /// Number of synthetic HR images instead of a directory.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Crop size (defaults to the model image size).
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve LR images with a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Layer-wise LF/HF cosine to the final layer, per timestep.
    AnalyzeLayers {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: u64,
        /// Comma-separated timesteps.
        #[arg(long, value_delimiter = ',', default_values_t = CURVE_TIMESTEPS.to_vec())]
        t: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0.2)]
        r: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectral log-magnitude histograms of the LF and HF bands of images.
    AnalyzeBands {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        r: f64,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-sample band cosine matrix of one layer.
    AnalyzeBatch {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 500)]
        t: usize,
        #[arg(long, value_enum, default_value = "hf")]
        band: BandArg,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 0.2)]
        r: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM of predictions against references with matching names.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation tables and write ablation.csv.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// all | objective | components | bands | adaptive
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

fn load_images(dir: &Path) -> Result<Vec<Image>> {
    Ok(commands::load_dir(dir)?.into_iter().map(|(_, i)| i).collect())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            steps,
            no_framer,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = steps {
                extra.push(format!("train.steps={s}"));
            }
            if no_framer {
                extra.push("use_framer=false".into());
            }
            let cfg = config.load(&extra)?;
            let (_, logs) = commands::train(&cfg, seed, Some(&out))?;
            if let (Some(first), Some(last)) = (logs.first(), logs.last()) {
                println!(
                    "trained {} steps: total {:.6} -> {:.6}; outputs in {}",
                    logs.len(),
                    first.total,
                    last.total,
                    out.display()
                );
            }
        }
        Command::Degrade {
            config,
            seed,
            input,
            synthetic,
            crop,
            out,
        } => {
            let cfg = config.load(&[])?;
            let crop = crop.unwrap_or(cfg.backbone.image_size);
            let source = match (input, synthetic) {
                (Some(dir), _) => HrSource::Directory(dir),
                (None, Some(count)) => HrSource::Synthetic { count, size: crop },
                (None, None) => return Err(CliError::Usage("pass --in DIR or --synthetic N".into())),
            };
            let m = commands::degrade(&cfg.degradation.clone().with_crop(crop), &source, seed, &out)?;
            println!("{} pairs, config {}", m.pairs.len(), m.config_hash);
        }
        Command::Sample {
            checkpoint,
            input,
            out,
            seed,
            sampler,
            steps,
        } => {
            let model = Model::load(&checkpoint)?;
            let mut sc = model.config.sampler.clone();
            if let Some(s) = sampler {
                sc.kind = match s {
                    SamplerArg::Ddpm => SamplerKind::Ddpm,
                    SamplerArg::Ddim => SamplerKind::Ddim,
                };
            }
            if let Some(k) = steps {
                sc.steps = k;
            }
            let inputs = commands::load_dir(&input)?;
            let lrs: Vec<Image> = inputs.iter().map(|(_, i)| i.clone()).collect();
            let preds = commands::sample_images(&model.snapshot(), &model.schedule, &sc, &lrs, seed)?;
            std::fs::create_dir_all(&out).map_err(|source| CliError::Io {
                path: out.clone(),
                source,
            })?;
            for ((path, _), img) in inputs.iter().zip(&preds) {
                let name = path.file_stem().unwrap_or_default().to_string_lossy();
                img.save(&out.join(format!("{name}.png")))?;
            }
            println!("{} images written to {}", preds.len(), out.display());
        }
        Command::AnalyzeLayers {
            model,
            seed,
            t,
            samples,
            r,
            out,
        } => {
            let m = model.model(seed)?;
            let rows = commands::analyze_layers(&m, seed, &t, samples, r)?;
            commands::write_text(&out, &curves_to_csv(&rows))?;
        }
        Command::AnalyzeBands { input, r, bins, out } => {
            let imgs = load_images(&input)?;
            let hist = commands::analyze_bands(&imgs, r, bins)?;
            commands::write_text(&out, &hist.to_csv())?;
            println!(
                "mean log-magnitude: lf {:.4}, hf {:.4}",
                hist.lf_mean_value, hist.hf_mean_value
            );
        }
        Command::AnalyzeBatch {
            model,
            seed,
            layer,
            t,
            band,
            samples,
            r,
            out,
        } => {
            let m = model.model(seed)?;
            let band = match band {
                BandArg::Lf => Band::Lf,
                BandArg::Hf => Band::Hf,
            };
            let mat = commands::analyze_batch(&m, seed, layer, t, band, samples, r)?;
            commands::write_text(&out, &matrix_to_csv(&mat))?;
            println!("mean off-diagonal similarity {:.4}", mean_off_diagonal(&mat));
        }
        Command::Metrics { pred, reference, out } => {
            let rows = commands::metrics(&pred, &reference)?;
            commands::write_text(&out, &commands::metrics_csv(&rows))?;
        }
        Command::Ablate {
            config,
            seed,
            out,
            steps,
            suite,
        } => {
            let suite: Suite = suite.parse()?;
            let extra: Vec<String> = steps.map(|s| format!("train.steps={s}")).into_iter().collect();
            let cfg = config.load(&extra)?;
            let rows = ablation::run_suite(&cfg, seed, &out, suite)?;
            println!("{} rows written to {}", rows.len(), out.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
