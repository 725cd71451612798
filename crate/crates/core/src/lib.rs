//! Toy-scale toolkit for frequency-aligned self-distillation of diffusion
//! super-resolution models.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod degrade;
pub mod diffusion;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod resample;
pub mod spectral;
pub mod tensor;
pub mod train;
