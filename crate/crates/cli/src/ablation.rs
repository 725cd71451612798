//! The ablation suite: every row of the objective, contrastive-component,
//! LF/HF-combination and FAW/FAM tables as a config variant of one base
//! experiment, trained under a shared seed.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use framer_core::analysis::{degrade_all, mean_in_depth};
use framer_core::data::split_seed;
use framer_core::metrics::{psnr_image, ssim};
use framer_core::spectral::Band;
use framer_core::train::{self, STREAM_EVAL};
use framer_loss::{LossKind, NegativeSelect, TeacherSelect, VARIANTS};

use crate::commands::{sample_images, train as train_run, write_text};
use crate::config::ExperimentConfig;
use crate::{CliError, Result};

/// Depth range of the mid-layer summaries.
pub const MID_DEPTH: (f64, f64) = (0.4, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Objective,
    Components,
    Bands,
    Adaptive,
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "objective" => Suite::Objective,
            "components" => Suite::Components,
            "bands" => Suite::Bands,
            "adaptive" => Suite::Adaptive,
            other => return Err(CliError::Usage(format!("unknown suite {other:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Variant {
    pub table: &'static str,
    pub name: String,
    pub config: ExperimentConfig,
}

fn variant(table: &'static str, name: &str, config: ExperimentConfig) -> Variant {
    Variant {
        table,
        name: name.to_string(),
        config,
    }
}

/// All rows of the selected tables. The first three tables run the
/// contrastive objective without FAW and FAM.
pub fn variants(base: &ExperimentConfig, suite: Suite) -> Vec<Variant> {
    let baseline = ExperimentConfig {
        use_framer: false,
        ..base.clone()
    };
    let cl = {
        let mut c = base.clone();
        c.use_framer = true;
        c.framer = framer_loss::FramerConfig {
            radius: base.framer.radius,
            temperature: base.framer.temperature,
            detach_teacher: base.framer.detach_teacher,
            ..framer_loss::FramerConfig::cl_only()
        };
        c
    };
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cl.clone();
        f(&mut c);
        c
    };
    let mut out = Vec::new();
    if matches!(suite, Suite::All | Suite::Objective) {
        out.push(variant("objective", "baseline", baseline.clone()));
        out.push(variant(
            "objective",
            "mse",
            with(&|c| c.framer.objective = LossKind::Mse),
        ));
        out.push(variant(
            "objective",
            "mse_freq",
            with(&|c| c.framer.objective = LossKind::MseFreq),
        ));
        out.push(variant("objective", "cl_freq", cl.clone()));
    }
    if matches!(suite, Suite::All | Suite::Components) {
        for (name, t) in [
            ("teacher_random", TeacherSelect::Random),
            ("teacher_final-1", TeacherSelect::FinalMinus1),
            ("teacher_final-2", TeacherSelect::FinalMinus2),
        ] {
            out.push(variant("components", name, with(&|c| c.framer.teacher_select = t)));
        }
        out.push(variant(
            "components",
            "negative_previous",
            with(&|c| c.framer.negative_select = NegativeSelect::PreviousLayer),
        ));
        out.push(variant("components", "final_teacher_random_negative", cl.clone()));
    }
    if matches!(suite, Suite::All | Suite::Bands) {
        out.push(variant("bands", "baseline", baseline.clone()));
        for (name, lf, hf) in VARIANTS {
            out.push(variant(
                "bands",
                name,
                with(&|c| {
                    c.framer.lf_loss = lf;
                    c.framer.hf_loss = hf;
                }),
            ));
        }
    }
    if matches!(suite, Suite::All | Suite::Adaptive) {
        out.push(variant("adaptive", "baseline", baseline));
        for (name, faw, fam) in [
            ("cl_only", false, false),
            ("faw_only", true, false),
            ("fam_only", false, true),
            ("faw_fam", true, true),
        ] {
            out.push(variant(
                "adaptive",
                name,
                with(&|c| {
                    c.framer.use_faw = faw;
                    c.framer.use_fam = fam;
                }),
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub table: String,
    pub variant: String,
    /// Directory of the run that produced this row (shared by duplicates).
    pub run: String,
    pub final_noise: f64,
    pub final_total: f64,
    pub mean_lf_cos: f64,
    pub mean_hf_cos: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub const CSV_HEADER: &str = "table,variant,run,final_noise,final_total,mean_lf_cos,mean_hf_cos,psnr,ssim";

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.table, r.variant, r.run, r.final_noise, r.final_total, r.mean_lf_cos, r.mean_hf_cos, r.psnr, r.ssim
        );
    }
    s
}

struct RunResult {
    run: String,
    final_noise: f64,
    final_total: f64,
    lf: f64,
    hf: f64,
    psnr: f64,
    ssim: f64,
}

fn run_one(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunResult> {
    let (trainer, logs) = train_run(cfg, seed, Some(dir))?;
    let last = logs.last().expect("at least one step");
    let (lf, hf) = if cfg.train.eval_samples > 0 {
        let rows = trainer.layer_curves()?;
        (
            mean_in_depth(&rows, Band::Lf, MID_DEPTH.0, MID_DEPTH.1),
            mean_in_depth(&rows, Band::Hf, MID_DEPTH.0, MID_DEPTH.1),
        )
    } else {
        (f64::NAN, f64::NAN)
    };
    let (mut psnr, mut ss) = (f64::NAN, f64::NAN);
    let n = cfg.eval.metric_samples;
    if n > 0 {
        let imgs = train::eval_images(trainer.data(), cfg.backbone.image_size, seed, n)?;
        let pairs = degrade_all(&imgs, trainer.degradation(), split_seed(seed, STREAM_EVAL))?;
        let lrs: Vec<_> = pairs.iter().map(|p| p.lr.clone()).collect();
        let preds = sample_images(&trainer.snapshot(), trainer.schedule(), &cfg.eval.sampler, &lrs, seed)?;
        let (mut ps, mut sv) = (0.0, 0.0);
        for (pred, pair) in preds.iter().zip(&pairs) {
            ps += psnr_image(pred, &pair.hr, 1.0)?;
            sv += ssim(pred, &pair.hr, 1.0)?;
        }
        psnr = ps / n as f64;
        ss = sv / n as f64;
    }
    Ok(RunResult {
        run: dir.file_name().unwrap_or_default().to_string_lossy().to_string(),
        final_noise: last.noise,
        final_total: last.total,
        lf,
        hf,
        psnr,
        ssim: ss,
    })
}

/// Trains each distinct variant once under `seed` and writes
/// `ablation.csv` plus one run directory per distinct config into `out`.
pub fn run_suite(base: &ExperimentConfig, seed: u64, out: &Path, suite: Suite) -> Result<Vec<AblationRow>> {
    let mut done: HashMap<String, usize> = HashMap::new();
    let mut results: Vec<RunResult> = Vec::new();
    let mut rows = Vec::new();
    for v in variants(base, suite) {
        v.config.validate()?;
        let key = serde_json::to_string(&v.config)?;
        let idx = match done.get(&key) {
            Some(&i) => i,
            None => {
                let dir = out.join("runs").join(format!("{}-{}", v.table, v.name));
                log::info!("ablation run {}/{}", v.table, v.name);
                results.push(run_one(&v.config, seed, &dir)?);
                done.insert(key, results.len() - 1);
                results.len() - 1
            }
        };
        let r = &results[idx];
        rows.push(AblationRow {
            table: v.table.to_string(),
            variant: v.name,
            run: r.run.clone(),
            final_noise: r.final_noise,
            final_total: r.final_total,
            mean_lf_cos: r.lf,
            mean_hf_cos: r.hf,
            psnr: r.psnr,
            ssim: r.ssim,
        });
    }
    write_text(&out.join("ablation.csv"), &rows_to_csv(&rows))?;
    Ok(rows)
}
