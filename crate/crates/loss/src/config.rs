use serde::{Deserialize, Serialize};

use crate::{LossError, Result};

/// Distillation objective between student layers and the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// No distillation term.
    None,
    /// Plain feature MSE, no band split.
    Mse,
    /// MSE per frequency band.
    MseFreq,
    /// Band-wise contrastive terms.
    #[default]
    Contrastive,
}

/// Term used on one frequency band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandLoss {
    /// Positive teacher, one random-layer negative.
    Intra,
    /// Intra plus in-batch negatives from other samples.
    Inter,
    None,
}

/// Band assignments of the named LF/HF variants, `(name, lf, hf)`.
pub const VARIANTS: [(&str, BandLoss, BandLoss); 8] = [
    ("A", BandLoss::Intra, BandLoss::None),
    ("B", BandLoss::Inter, BandLoss::None),
    ("C", BandLoss::None, BandLoss::Intra),
    ("D", BandLoss::None, BandLoss::Inter),
    ("E", BandLoss::Inter, BandLoss::Intra),
    ("F", BandLoss::Inter, BandLoss::Inter),
    ("G", BandLoss::Intra, BandLoss::Intra),
    ("H", BandLoss::Intra, BandLoss::Inter),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TeacherSelect {
    #[default]
    #[serde(rename = "final")]
    Final,
    #[serde(rename = "final-1")]
    FinalMinus1,
    #[serde(rename = "final-2")]
    FinalMinus2,
    /// Uniform over all layers, redrawn every step.
    #[serde(rename = "random")]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSelect {
    #[default]
    RandomLayer,
    PreviousLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FramerConfig {
    pub objective: LossKind,
    pub lf_loss: BandLoss,
    pub hf_loss: BandLoss,
    pub use_faw: bool,
    pub use_fam: bool,
    pub teacher_select: TeacherSelect,
    pub negative_select: NegativeSelect,
    /// Stop gradients into the teacher features.
    pub detach_teacher: bool,
    /// Draw separate negative layers for the LF and HF branches.
    pub redraw_per_branch: bool,
    /// Softmax temperature; 1 leaves the scores unscaled.
    pub temperature: f64,
    /// Radius fraction of the LF mask.
    pub radius: f64,
}

impl Default for FramerConfig {
    fn default() -> Self {
        Self {
            objective: LossKind::Contrastive,
            lf_loss: BandLoss::Intra,
            hf_loss: BandLoss::Inter,
            use_faw: true,
            use_fam: true,
            teacher_select: TeacherSelect::Final,
            negative_select: NegativeSelect::RandomLayer,
            detach_teacher: false,
            redraw_per_branch: false,
            temperature: 1.0,
            radius: 0.2,
        }
    }
}

impl FramerConfig {
    /// Contrastive objective with fixed equal weights and unit gates.
    pub fn cl_only() -> Self {
        Self {
            use_faw: false,
            use_fam: false,
            ..Self::default()
        }
    }

    pub fn disabled() -> Self {
        Self {
            objective: LossKind::None,
            ..Self::default()
        }
    }

    /// Sets the LF/HF terms of a named variant (`"A"`..`"H"`).
    pub fn with_variant(mut self, name: &str) -> Result<Self> {
        let (_, lf, hf) = VARIANTS
            .iter()
            .find(|(n, _, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| LossError::Config(format!("unknown variant {name:?}")))?;
        self.lf_loss = *lf;
        self.hf_loss = *hf;
        Ok(self)
    }

    pub fn bands(&self) -> [BandLoss; 2] {
        [self.lf_loss, self.hf_loss]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LossError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.radius.is_finite() && self.radius > 0.0 && self.radius < 1.0) {
            return Err(LossError::Config(format!(
                "radius must lie in (0, 1), got {}",
                self.radius
            )));
        }
        let banded = matches!(self.objective, LossKind::Contrastive | LossKind::MseFreq);
        if banded && self.lf_loss == BandLoss::None && self.hf_loss == BandLoss::None {
            return Err(LossError::Config("both band terms are disabled".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_variant_h_with_both_mechanisms() {
        let c = FramerConfig::default();
        assert_eq!(c, FramerConfig::default().with_variant("h").unwrap());
        assert!(c.use_faw && c.use_fam && !c.detach_teacher);
        assert_eq!(c.temperature, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn serde_names() {
        let json = serde_json::to_string(&FramerConfig {
            teacher_select: TeacherSelect::FinalMinus2,
            negative_select: NegativeSelect::PreviousLayer,
            objective: LossKind::MseFreq,
            ..FramerConfig::default()
        })
        .unwrap();
        assert!(json.contains("\"final-2\""), "{json}");
        assert!(json.contains("\"previous_layer\""));
        assert!(json.contains("\"mse_freq\""));
        let back: FramerConfig = serde_json::from_str(r#"{"hf_loss": "none"}"#).unwrap();
        assert_eq!(back.hf_loss, BandLoss::None);
        assert!(back.use_faw);
    }

    #[test]
    fn variants_cover_all_eight_assignments() {
        let mut seen = std::collections::HashSet::new();
        for (name, lf, hf) in VARIANTS {
            let c = FramerConfig::default().with_variant(name).unwrap();
            assert_eq!(c.bands(), [lf, hf]);
            seen.insert((format!("{lf:?}"), format!("{hf:?}")));
        }
        assert_eq!(seen.len(), 8);
        assert!(FramerConfig::default().with_variant("Z").is_err());
    }

    #[test]
    fn invalid_configs() {
        let c = FramerConfig {
            temperature: 0.0,
            ..FramerConfig::default()
        };
        assert!(c.validate().is_err());
        let c = FramerConfig {
            lf_loss: BandLoss::None,
            hf_loss: BandLoss::None,
            ..FramerConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(FramerConfig {
            lf_loss: BandLoss::None,
            hf_loss: BandLoss::None,
            ..FramerConfig::disabled()
        }
        .validate()
        .is_ok());
    }
}
