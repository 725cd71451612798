//! Frequency-aligned self-distillation losses: band-wise contrastive terms
//! between intermediate layers and a teacher layer, adaptive band weighting
//! from spectral energy gaps, and detached alignment gates.
//!
//! Everything here builds nodes on a [`framer_core::tensor::Graph`]; the
//! training loop in `framer-core` reaches this crate only through
//! [`FramerDistiller`].

mod config;
mod contrastive;
mod distiller;
mod layer;
mod modulation;
mod negative;

pub use config::{BandLoss, FramerConfig, LossKind, NegativeSelect, TeacherSelect, VARIANTS};
pub use contrastive::{cosine_sim, info_nce, inter_cl, intra_cl};
pub use distiller::FramerDistiller;
pub use layer::{
    band_term, sample_layer_loss, total_loss, FramerLoss, FramerOutput, FrozenModulation, Gates, LossBreakdown,
    SampleBands, SampleTerms,
};
pub use modulation::{fam_gate, fam_gates, fam_gates_from_cosines, faw_weights, FawWeights, LayerModulation};
pub use negative::{draw_negative, draw_negative_layer, previous_layer, NegativeDraw};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] framer_core::tensor::TensorError),
    #[error(transparent)]
    Spectral(#[from] framer_core::spectral::SpectralError),
    #[error("insufficient layers for random-layer negative (n = {n})")]
    InsufficientLayers { n: usize },
    #[error("non-finite {what}{}", layer.map(|i| format!(" at layer {i}")).unwrap_or_default())]
    NonFinite { what: &'static str, layer: Option<usize> },
    #[error("invalid loss config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;
