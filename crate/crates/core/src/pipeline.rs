//! Reference-conditioned generation with a trained checkpoint.

use crate::diffusion::{ddim_sample, GuidanceConfig, NoiseSchedule};
use crate::enrich::{EnrichedPrompt, Enricher};
use crate::error::Result;
use crate::model::{Conditioning, GuidedModel, LatentCodec, RgbImage, TextEncoder};
use crate::rng::{indexed, randn, Stream};
use crate::tensor::Tensor;
use crate::train::LoadedModel;

/// Starting latent for generation `index` under `seed`.
pub fn initial_noise(shape: &[usize], seed: u64, index: u64) -> Tensor<f32> {
    randn(&mut indexed(seed, Stream::Sample, index), shape)
}

/// A frozen model plus the fixed text encoder, codec and schedule.
pub struct Generator<'a> {
    pub model: &'a LoadedModel,
    text: TextEncoder,
    codec: LatentCodec,
    sched: NoiseSchedule,
}

impl<'a> Generator<'a> {
    pub fn new(model: &'a LoadedModel) -> Self {
        Self {
            text: model.text_encoder(),
            codec: model.codec(),
            sched: NoiseSchedule::default_schedule(),
            model,
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.codec.latent_shape()
    }

    /// Runs guided DDIM from `z_start`. Without a reference the model only
    /// sees the prompt.
    pub fn generate(
        &self,
        reference: Option<&RgbImage>,
        prompt: &str,
        z_start: &Tensor<f32>,
        guidance: &GuidanceConfig,
    ) -> Result<RgbImage> {
        let text = self.text.encode::<f32>(prompt)?.values;
        let refs = match reference {
            Some(img) => {
                let latent = self.codec.encode(img)?;
                Some(self.model.unet.encode_reference(&self.model.store, &latent)?)
            }
            None => None,
        };
        let guided = GuidedModel {
            unet: &self.model.unet,
            store: &self.model.store,
            cond: Conditioning { text: Some(text), refs },
        };
        let z0 = ddim_sample(&guided, z_start, guidance, &self.sched)?;
        self.codec.decode(&z0)
    }

    /// Enriches `user_prompt` from the reference, then generates with the
    /// noise drawn from `seed`.
    pub fn sample(
        &self,
        reference: &RgbImage,
        user_prompt: &str,
        enricher: &Enricher,
        seed: u64,
        guidance: &GuidanceConfig,
    ) -> Result<(RgbImage, EnrichedPrompt)> {
        let prompt = enricher.enrich(user_prompt, reference);
        let z = initial_noise(&self.latent_shape(), seed, 0);
        let img = self.generate(Some(reference), &prompt.text, &z, guidance)?;
        Ok((img, prompt))
    }
}
