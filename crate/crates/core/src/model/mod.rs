//! Denoising network, latent codec, text encoder and image I/O.

pub mod codec;
pub mod image;
pub mod text;
pub mod unet;

pub use codec::LatentCodec;
pub use image::{GrayImage, Rgb, RgbImage};
pub use text::{TextEmbedding, TextEncoder};
pub use unet::{Conditioning, GuidedModel, ModelConfig, ReferenceFeatureSet, UNet, SITE_NAMES};
