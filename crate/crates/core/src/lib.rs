//! Garment-conditioned latent diffusion at desk scale.
//!
//! A small denoising UNet doubles as its own reference encoder: the same
//! weights run with gated LoRA branches switched on to extract reference
//! features, which the denoiser then consumes through adaptive attention.

pub mod conditioning;
pub mod diffusion;
pub mod enrich;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
