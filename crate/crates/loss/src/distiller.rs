use framer_core::backbone::BackboneConfig;
use framer_core::tensor::{Graph, Var};
use framer_core::train::{DistillContext, DistillOutput, Distiller};

use crate::config::FramerConfig;
use crate::layer::{total_loss, FramerLoss, LossBreakdown};
use crate::Result;

/// Plugs [`FramerLoss`] into the training loop: adapts every tap to the
/// final-layer shape, then evaluates the objective.
#[derive(Debug, Clone)]
pub struct FramerDistiller {
    loss: FramerLoss,
    last: Option<LossBreakdown>,
}

impl FramerDistiller {
    pub fn new(config: FramerConfig, backbone: &BackboneConfig) -> Result<Self> {
        let [_, h, w] = backbone.reference_shape();
        Ok(Self {
            loss: FramerLoss::new(config, h, w)?,
            last: None,
        })
    }

    pub fn loss(&self) -> &FramerLoss {
        &self.loss
    }

    /// Breakdown of the most recent step.
    pub fn last(&self) -> Option<&LossBreakdown> {
        self.last.as_ref()
    }
}

impl Distiller for FramerDistiller {
    fn distill(
        &mut self,
        g: &mut Graph,
        ctx: DistillContext<'_, '_>,
    ) -> std::result::Result<DistillOutput, Box<dyn std::error::Error + Send + Sync>> {
        if self.loss.config().objective == crate::LossKind::None {
            self.last = Some(total_loss(ctx.noise_loss, &[])?);
            return Ok(DistillOutput {
                loss: None,
                per_layer: Vec::new(),
            });
        }
        let features = ctx
            .taps
            .iter()
            .map(|t| ctx.backbone.adapt_tap(g, ctx.params, t))
            .collect::<std::result::Result<Vec<Var>, _>>()?;
        let out = self.loss.compute(g, &features, ctx.rng, None)?;
        let breakdown = total_loss(ctx.noise_loss, &out.records)?;
        self.last = Some(breakdown);
        Ok(DistillOutput {
            loss: out.loss,
            per_layer: out.records,
        })
    }
}
