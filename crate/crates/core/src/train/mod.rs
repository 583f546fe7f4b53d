//! Two-stage training: a text-conditioned base prior (stage `base`), then
//! the reference-conditioning stage (`dressing`) under one of four
//! trainability modes.

pub mod adamw;
pub mod checkpoint;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{LatentCodec, ModelConfig, TextEncoder, UNet};
use crate::rng::{randn, substream, RngState, Stream};
use crate::synth::caption::CaptionTier;
use crate::synth::Dataset;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tape, Tensor};

pub use adamw::{adamw_step, AdamWConfig};
pub use checkpoint::Checkpoint;
pub use report::{report_params, ParamReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Text-conditioned pretraining of the denoiser's own weights.
    Base,
    /// Reference conditioning on top of a frozen base checkpoint.
    Dressing,
}

/// Which parameter groups the dressing stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Every parameter, base weights included.
    Finetuning,
    OnlyLora,
    OnlyAdapter,
    /// LoRA and adapters.
    Full,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Finetuning,
        AblationMode::OnlyLora,
        AblationMode::OnlyAdapter,
        AblationMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Finetuning => "finetuning",
            AblationMode::OnlyLora => "only_lora",
            AblationMode::OnlyAdapter => "only_adapter",
            AblationMode::Full => "full",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            AblationMode::Finetuning => true,
            AblationMode::Full => group != ParamGroup::Base,
            AblationMode::OnlyLora => group == ParamGroup::Lora,
            AblationMode::OnlyAdapter => group == ParamGroup::Adapter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Ignored in the base stage, which always trains the base weights.
    pub mode: AblationMode,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lora_rank: usize,
    pub cfg_dropout: f64,
    pub seed: u64,
    pub caption_tier: CaptionTier,
    /// Samples generated from `seed` when `data_dir` is unset.
    pub dataset_size: usize,
    pub data_dir: Option<PathBuf>,
    /// Base-stage checkpoint the dressing stage starts from.
    pub base_checkpoint: Option<PathBuf>,
    pub adamw: AdamWConfig,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub log_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Dressing,
            mode: AblationMode::Full,
            lr: 1e-4,
            batch_size: 8,
            steps: 2000,
            lora_rank: 8,
            cfg_dropout: 0.1,
            seed: 0,
            caption_tier: CaptionTier::Rich,
            dataset_size: 512,
            data_dir: None,
            base_checkpoint: None,
            adamw: AdamWConfig::default(),
            grad_clip: 1.0,
            log_every: 50,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::load_unchecked(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses without the cross-field checks of [`TrainConfig::validate`].
    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return bad("cfg_dropout must lie in [0, 1)");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        if self.data_dir.is_none() && self.dataset_size == 0 {
            return bad("dataset_size must be positive");
        }
        if self.stage == Stage::Dressing && self.base_checkpoint.is_none() {
            return bad("the dressing stage needs base_checkpoint");
        }
        self.model_config().validate()
    }

    /// Model architecture with the configured LoRA rank.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            lora_rank: Some(self.lora_rank),
            ..self.model.clone()
        }
    }

    /// Whether parameters of `group` are updated in this run.
    pub fn trains(&self, group: ParamGroup) -> bool {
        match self.stage {
            Stage::Base => group == ParamGroup::Base,
            Stage::Dressing => self.mode.trains(group),
        }
    }

    pub fn codec(&self) -> LatentCodec {
        LatentCodec {
            patch: self.model.codec_patch,
            image_size: self.model.image_size,
        }
    }
}

/// A model restored from a checkpoint.
pub struct LoadedModel {
    pub config: TrainConfig,
    pub unet: UNet,
    pub store: ParamStore<f32>,
    pub step: u64,
    /// SHA-256 of the checkpoint file.
    pub file_hash: String,
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Usage(format!("checkpoint {} not found", path.display())));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        let config: TrainConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let (unet, mut store) = build_model(&config, 0)?;
        restore_params(&mut store, &ck.tensors, |_| true)?;
        use sha2::Digest;
        Ok(Self {
            config,
            unet,
            store,
            step: ck.step,
            file_hash: hex::encode(sha2::Sha256::digest(&bytes)),
        })
    }

    pub fn text_encoder(&self) -> TextEncoder {
        TextEncoder::new(self.config.model.d_text)
    }

    pub fn codec(&self) -> LatentCodec {
        self.config.codec()
    }
}

/// Fresh model for `cfg` with weights drawn from `seed`'s init stream.
pub fn build_model(cfg: &TrainConfig, seed: u64) -> Result<(UNet, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, Stream::ModelInit);
    let unet = UNet::new(cfg.model_config(), &mut store, &mut rng)?;
    Ok((unet, store))
}

/// Copies `param/NAME` tensors into `store` for every entry selected by
/// `pick`. Every selected parameter must be present with its exact shape.
fn restore_params(
    store: &mut ParamStore<f32>,
    tensors: &BTreeMap<String, Tensor<f32>>,
    pick: impl Fn(ParamGroup) -> bool,
) -> Result<()> {
    let ids: Vec<ParamId> = store.entries().filter(|(_, e)| pick(e.group)).map(|(id, _)| id).collect();
    let mut values = Vec::with_capacity(ids.len());
    for &id in &ids {
        let e = store.get(id);
        let key = format!("param/{}", e.name);
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{key}`")))?;
        if t.shape() != e.value.shape() {
            return Err(Error::dim("checkpoint tensor", t.shape(), e.value.shape()));
        }
        values.push(t.clone());
    }
    for (id, t) in ids.into_iter().zip(values) {
        *store.value_mut(id) = t;
    }
    Ok(())
}

/// Noise draws for one element of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub index: usize,
    pub t: usize,
    /// Both text and reference are dropped for this element.
    pub drop_cond: bool,
    pub eps: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Batch-mean loss with gradients of every trainable parameter.
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<(ParamId, Vec<f32>)>,
}

struct Example {
    target: Tensor<f32>,
    reference: Tensor<f32>,
    text: Tensor<f32>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

pub struct Trainer {
    config: TrainConfig,
    unet: UNet,
    store: ParamStore<f32>,
    sched: NoiseSchedule,
    examples: Vec<Example>,
    trainable: Vec<ParamId>,
    moments: Vec<Moments>,
    rng: ChaCha8Rng,
    step: u64,
    losses: Vec<f64>,
    frozen_checksum: String,
}

impl Trainer {
    /// Fresh run. The dressing stage loads the base weights from
    /// `config.base_checkpoint` and re-derives adapters from them.
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let (unet, mut store) = build_model(&config, config.seed)?;
        if config.stage == Stage::Dressing {
            let path = config.base_checkpoint.as_ref().expect("validated");
            let base = Checkpoint::load(path)?;
            restore_params(&mut store, &base.tensors, |g| g == ParamGroup::Base)?;
            unet.reset_adapters(&mut store);
        }
        let rng = substream(config.seed, Stream::Train);
        Self::assemble(config, unet, store, rng, data)
    }

    /// Continues the run stored in `ck`. `config` must equal the stored
    /// configuration in everything except `steps`.
    pub fn resume(config: TrainConfig, ck: &Checkpoint, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let stored: TrainConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let same = serde_json::to_value(TrainConfig { steps: config.steps, ..stored })?
            == serde_json::to_value(&config)?;
        if !same {
            return Err(Error::Config(
                "resume config differs from the checkpoint's (only `steps` may change)".into(),
            ));
        }
        if ck.step > config.steps {
            return Err(Error::Config(format!(
                "checkpoint is at step {} beyond the configured {} steps",
                ck.step, config.steps
            )));
        }
        let rng = ck
            .rng
            .as_ref()
            .ok_or_else(|| Error::Format { offset: 0, detail: "checkpoint has no rng state".into() })?
            .restore()?;
        let (unet, mut store) = build_model(&config, config.seed)?;
        restore_params(&mut store, &ck.tensors, |_| true)?;
        let mut tr = Self::assemble(config, unet, store, rng, data)?;
        for (i, &id) in tr.trainable.iter().enumerate() {
            let name = &tr.store.get(id).name;
            let n = tr.store.value(id).numel();
            let get = |k: &str| -> Result<Vec<f32>> {
                let key = format!("{k}/{name}");
                let t = ck
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Contract(format!("checkpoint lacks `{key}`")))?;
                if t.numel() != n {
                    return Err(Error::dim("optimizer state", t.shape(), &[n]));
                }
                Ok(t.data().to_vec())
            };
            tr.moments[i] = Moments { m: get("adam_m")?, v: get("adam_v")? };
        }
        tr.step = ck.step;
        Ok(tr)
    }

    fn assemble(
        config: TrainConfig,
        unet: UNet,
        mut store: ParamStore<f32>,
        rng: ChaCha8Rng,
        data: &Dataset,
    ) -> Result<Self> {
        if data.samples.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        store.set_trainable(|g| config.trains(g));
        unet.partition(&store)?;
        let trainable = store.trainable_ids();
        let moments = trainable
            .iter()
            .map(|&id| {
                let n = store.value(id).numel();
                Moments { m: vec![0.0; n], v: vec![0.0; n] }
            })
            .collect();
        let codec = config.codec();
        let text = TextEncoder::new(config.model.d_text);
        let examples = data
            .samples
            .iter()
            .map(|s| {
                Ok(Example {
                    target: codec.encode(&s.target)?,
                    reference: codec.encode(&s.reference)?,
                    text: text.encode(s.captions.get(config.caption_tier))?.values,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let frozen_checksum = store.checksum(|e| !e.trainable);
        Ok(Self {
            config,
            unet,
            store,
            sched: NoiseSchedule::default_schedule(),
            examples,
            trainable,
            moments,
            rng,
            step: 0,
            losses: Vec::new(),
            frozen_checksum,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Batch-mean losses of the steps taken by this instance.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn trainable_ids(&self) -> &[ParamId] {
        &self.trainable
    }

    /// Draws the next batch: per element the sample index, timestep,
    /// condition-dropout coin and noise, in that order.
    pub fn sample_batch(&mut self) -> Batch {
        let n = self.examples.len();
        let shape = self.config.model.latent_shape();
        let steps = self.sched.steps();
        let items = (0..self.config.batch_size)
            .map(|_| {
                let index = self.rng.gen_range(0..n);
                let t = self.rng.gen_range(1..=steps);
                let drop_cond = self.rng.gen::<f64>() < self.config.cfg_dropout;
                let eps = randn(&mut self.rng, &shape);
                BatchItem { index, t, drop_cond, eps }
            })
            .collect();
        Batch { items }
    }

    pub fn loss_and_grads(&self, batch: &Batch) -> Result<LossAndGrads> {
        let mut total = 0.0;
        let mut acc: Vec<Vec<f32>> = self
            .trainable
            .iter()
            .map(|&id| vec![0.0; self.store.value(id).numel()])
            .collect();
        let scale = 1.0 / batch.items.len() as f32;
        for item in &batch.items {
            let ex = self
                .examples
                .get(item.index)
                .ok_or_else(|| Error::Index(format!("batch index {} out of range", item.index)))?;
            let z_t = forward_diffuse(&ex.target, item.t, &item.eps, &self.sched)?;
            let mut tape = Tape::new();
            let refs = if self.config.stage == Stage::Dressing && !item.drop_cond {
                let r = tape.constant(ex.reference.clone());
                Some(self.unet.encode_reference_var(&mut tape, &self.store, r)?)
            } else {
                None
            };
            let text = (!item.drop_cond).then(|| tape.constant(ex.text.clone()));
            let z = tape.constant(z_t);
            let pred = self.unet.denoise_var(&mut tape, &self.store, z, item.t, text, refs.as_deref())?;
            let eps = tape.constant(item.eps.clone());
            let loss = tape.mse(pred, eps)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::TrainingAborted {
                    step: self.step + 1,
                    detail: format!("non-finite loss {value}"),
                });
            }
            total += value;
            tape.backward(loss)?;
            for (slot, &id) in acc.iter_mut().zip(&self.trainable) {
                if let Some(g) = tape.param_grad(id) {
                    slot.iter_mut().zip(g).for_each(|(a, &b)| *a += b * scale);
                }
            }
        }
        Ok(LossAndGrads {
            loss: total / batch.items.len() as f64,
            grads: self.trainable.iter().copied().zip(acc).collect(),
        })
    }

    /// Clips by global norm and takes one AdamW step.
    pub fn apply(&mut self, mut grads: LossAndGrads) -> Result<()> {
        let next = self.step + 1;
        let sq: f64 = grads
            .grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum();
        if !sq.is_finite() {
            return Err(Error::TrainingAborted {
                step: next,
                detail: "non-finite gradient".into(),
            });
        }
        let norm = sq.sqrt();
        if norm > self.config.grad_clip {
            let c = (self.config.grad_clip / norm) as f32;
            grads.grads.iter_mut().for_each(|(_, g)| g.iter_mut().for_each(|x| *x *= c));
        }
        for (i, (id, g)) in grads.grads.iter().enumerate() {
            if *id != self.trainable[i] {
                return Err(Error::Integrity("gradient list does not match trainable set".into()));
            }
            let Moments { m, v } = &mut self.moments[i];
            adamw_step(
                self.store.value_mut(*id).data_mut(),
                g,
                m,
                v,
                next,
                self.config.lr,
                &self.config.adamw,
            )
            .map_err(|e| Error::TrainingAborted { step: next, detail: e.to_string() })?;
        }
        self.step = next;
        self.losses.push(grads.loss);
        Ok(())
    }

    /// Samples a batch, computes gradients and updates; returns the loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let batch = self.sample_batch();
        let lg = self.loss_and_grads(&batch)?;
        let loss = lg.loss;
        self.apply(lg)?;
        if self.step % self.config.log_every == 0 {
            self.verify_frozen()?;
        }
        Ok(loss)
    }

    /// Runs until `config.steps`, calling `on_log(step, mean_loss)` every
    /// `log_every` steps with the mean over that window.
    pub fn run(&mut self, mut on_log: impl FnMut(u64, f64)) -> Result<()> {
        let mut window = Vec::new();
        while self.step < self.config.steps {
            window.push(self.train_step()?);
            if self.step % self.config.log_every == 0 || self.step == self.config.steps {
                let mean = window.iter().sum::<f64>() / window.len() as f64;
                log::info!("step {} loss {mean:.5}", self.step);
                on_log(self.step, mean);
                window.clear();
            }
        }
        self.verify_frozen()
    }

    /// Fails if any parameter outside the trainable set has changed.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.store.checksum(|e| !e.trainable);
        if now != self.frozen_checksum {
            return Err(Error::Integrity(format!(
                "frozen parameters changed by step {}",
                self.step
            )));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for (_, e) in self.store.entries() {
            tensors.insert(format!("param/{}", e.name), e.value.clone());
        }
        for (&id, mo) in self.trainable.iter().zip(&self.moments) {
            let e = self.store.get(id);
            let shape = e.value.shape().to_vec();
            tensors.insert(format!("adam_m/{}", e.name), Tensor::new(shape.clone(), mo.m.clone())?);
            tensors.insert(format!("adam_v/{}", e.name), Tensor::new(shape, mo.v.clone())?);
        }
        Ok(Checkpoint {
            config: serde_json::to_value(&self.config)?,
            step: self.step,
            rng: Some(RngState::capture(&self.rng)),
            tensors,
        })
    }
}

#[cfg(test)]
mod tests;
