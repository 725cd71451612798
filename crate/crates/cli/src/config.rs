//! Experiment configuration. A TOML file is merged key by key over the
//! serialized defaults, then `--set section.key=value` overrides apply, so
//! a file only needs the keys it changes.

use std::path::{Path, PathBuf};

use framer_core::backbone::BackboneConfig;
use framer_core::degrade::DegradationConfig;
use framer_core::diffusion::{SamplerConfig, ScheduleConfig};
use framer_core::optim::AdamConfig;
use framer_core::train::TrainSettings;
use framer_loss::FramerConfig;
use serde::{Deserialize, Serialize};

use crate::{io_at, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    /// Held-out samples for the layer-cosine curves (0 disables them).
    pub eval_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainSettings::default();
        Self {
            batch_size: d.batch_size,
            steps: d.steps,
            checkpoint_every: d.checkpoint_every,
            keep_checkpoints: d.keep_checkpoints,
            eval_samples: d.eval_samples,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of HR images; the synthetic generator is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

/// Held-out reconstruction metrics of the ablation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metric_samples: usize,
    pub sampler: SamplerConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            metric_samples: 4,
            sampler: SamplerConfig {
                steps: 10,
                ..SamplerConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Adds the distillation term; `false` trains on the noise loss alone.
    pub use_framer: bool,
    pub train: TrainSection,
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub optim: AdamConfig,
    pub framer: FramerConfig,
    pub degradation: DegradationConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalSection,
    pub data: DataSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            use_framer: true,
            train: TrainSection::default(),
            backbone: BackboneConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: AdamConfig::default(),
            framer: FramerConfig::default(),
            degradation: DegradationConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalSection::default(),
            data: DataSection::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to
/// a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_set(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut over = parse_scalar(raw.trim());
    for p in parts.iter().rev() {
        let mut t = toml::Table::new();
        t.insert(p.to_string(), over);
        over = toml::Value::Table(t);
    }
    merge(root, over);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, sets: &[String]) -> Result<Self> {
        let mut root = toml::Value::try_from(Self::default()).map_err(|e| CliError::Config(e.to_string()))?;
        let file: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut root, toml::Value::Table(file));
        for s in sets {
            apply_set(&mut root, s)?;
        }
        let cfg: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the optional file, then the overrides.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(io_at(p))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, sets)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.framer.validate()?;
        self.degradation
            .clone()
            .with_crop(self.backbone.image_size)
            .validate()?;
        if self.train.batch_size == 0 || self.train.steps == 0 {
            return Err(CliError::Config(
                "train.batch_size and train.steps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn settings(&self, seed: u64) -> TrainSettings {
        TrainSettings {
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            seed,
            checkpoint_every: self.train.checkpoint_every,
            keep_checkpoints: self.train.keep_checkpoints,
            eval_samples: self.train.eval_samples,
            radius: self.framer.radius,
        }
    }

    /// The loss configuration actually used by training.
    pub fn effective_framer(&self) -> FramerConfig {
        if self.use_framer {
            self.framer.clone()
        } else {
            FramerConfig::disabled()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(
            ExperimentConfig::from_toml_str("", &[]).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn round_trip_through_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn partial_nested_overrides() {
        let text = "use_framer = false\n[framer]\nuse_faw = false\n[degradation.stage2]\njpeg_prob = 0.0\n";
        let c =
            ExperimentConfig::from_toml_str(text, &["train.steps=7".into(), "framer.teacher_select=final-1".into()])
                .unwrap();
        assert!(!c.use_framer && !c.framer.use_faw && c.framer.use_fam);
        assert_eq!(c.degradation.stage2.jpeg_prob, 0.0);
        assert_eq!(c.degradation.stage1, ExperimentConfig::default().degradation.stage1);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.framer.teacher_select, framer_loss::TeacherSelect::FinalMinus1);
        assert_eq!(c.effective_framer().objective, framer_loss::LossKind::None);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[framer]\nuse_fawn = true\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["train.batch_size=0".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["nokey".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["backbone.n_layers=2".into()]).is_err());
    }

    #[test]
    fn annotated_example_parses() {
        let text = include_str!("../../../configs/example.toml");
        let c = ExperimentConfig::from_toml_str(text, &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }
}
