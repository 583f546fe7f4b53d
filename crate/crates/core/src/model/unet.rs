//! Toy denoising UNet that doubles as the reference encoder.
//!
//! Layout (latent `12×16×16`, width `d`):
//! patchify ×2 → stem conv → `down1 @8×8` → stride-2 conv → `down2 @4×4`
//! → `mid @4×4` → `up1 @4×4` (skip from down2) → upsample + conv →
//! `up2 @8×8` (skip from down1) → norm, SiLU, conv → unpatchify.
//!
//! Every block is a residual conv pair (gated LoRA), an adaptive attention
//! site and a text cross-attention. Running the same network with the gate
//! open and `t = 0` yields the reference features captured at each site.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{
    enumerate_trainable, AdaptiveAttention, GatedConv, GatedLinear, HasParams, InputTag,
    ParamPartition,
};
use crate::diffusion::{Branch, NoisePredictor};
use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const SITE_NAMES: [&str; 5] = ["down1", "down2", "mid", "up1", "up2"];
const GN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub codec_patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub groups: usize,
    pub d_text: usize,
    pub time_dim: usize,
    /// `None` builds the model without any LoRA branches. Set from the
    /// training configuration rather than read from JSON.
    #[serde(skip)]
    pub lora_rank: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            codec_patch: 2,
            d_model: 64,
            heads: 4,
            groups: 8,
            d_text: 32,
            time_dim: 64,
            lora_rank: Some(8),
        }
    }
}

impl ModelConfig {
    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.image_size / self.codec_patch;
        [3 * self.codec_patch * self.codec_patch, s, s]
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image_size / self.codec_patch;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.codec_patch == 0 || self.image_size % self.codec_patch != 0 {
            return bad("image_size must be a multiple of codec_patch");
        }
        if s % 4 != 0 {
            return bad("latent size must be a multiple of 4");
        }
        if self.d_model % self.groups != 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be divisible by groups and heads");
        }
        if self.time_dim % 2 != 0 || self.d_text == 0 {
            return bad("time_dim must be even and d_text positive");
        }
        if self.lora_rank == Some(0) {
            return bad("lora_rank must be positive");
        }
        Ok(())
    }

    /// Token-grid side length at each attention site.
    pub fn site_sides(&self) -> [usize; 5] {
        let s = self.image_size / self.codec_patch / 2;
        [s, s / 2, s / 2, s / 2, s]
    }
}

/// Group-norm affine parameters.
#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(&format!("{name}.gamma"), Tensor::full(&[c], T::one()), ParamGroup::Base)?,
            beta: store.insert(&format!("{name}.beta"), Tensor::zeros(&[c]), ParamGroup::Base)?,
        })
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, groups: usize) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, groups, Some(g), Some(b), GN_EPS)
    }
}

impl HasParams for Norm {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ParamGroup)) {
        f(self.gamma, ParamGroup::Base);
        f(self.beta, ParamGroup::Base);
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    conv1: GatedConv,
    time_proj: GatedLinear,
    norm2: Norm,
    conv2: GatedConv,
    skip: Option<GatedConv>,
    attn_norm: Norm,
    attn: AdaptiveAttention,
    cross_norm: Norm,
    cross_q: GatedLinear,
    cross_k: GatedLinear,
    cross_v: GatedLinear,
    cross_out: GatedLinear,
    c_out: usize,
}

impl Block {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let r = cfg.lora_rank;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            norm1: Norm::new(store, &n("norm1"), c_in)?,
            conv1: GatedConv::new(store, &n("conv1"), c_in, d, 3, 1, r, rng)?,
            time_proj: GatedLinear::new(store, &n("time_proj"), d, d, true, None, rng)?,
            norm2: Norm::new(store, &n("norm2"), d)?,
            conv2: GatedConv::new(store, &n("conv2"), d, d, 3, 1, r, rng)?,
            skip: if c_in != d {
                Some(GatedConv::new(store, &n("skip"), c_in, d, 1, 1, None, rng)?)
            } else {
                None
            },
            attn_norm: Norm::new(store, &n("attn_norm"), d)?,
            attn: AdaptiveAttention::new(store, &n("attn"), d, cfg.heads, r, rng)?,
            cross_norm: Norm::new(store, &n("cross_norm"), d)?,
            cross_q: GatedLinear::new(store, &n("cross.to_q"), d, d, false, None, rng)?,
            cross_k: GatedLinear::new(store, &n("cross.to_k"), cfg.d_text, d, false, None, rng)?,
            cross_v: GatedLinear::new(store, &n("cross.to_v"), cfg.d_text, d, false, None, rng)?,
            cross_out: GatedLinear::new(store, &n("cross.to_out"), d, d, true, None, rng)?,
            c_out: d,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &ModelConfig,
        h: Var,
        temb: Var,
        text: Var,
        pos: &Tensor<T>,
        reference: Option<Var>,
        tag: InputTag,
    ) -> Result<(Var, Var)> {
        let [_, hh, ww] = tape.value(h).dims3("block")?;
        let g = cfg.groups;
        let c = self.c_out;

        let r = self.norm1.apply(tape, store, h, g)?;
        let r = tape.silu(r);
        let r = self.conv1.forward(tape, store, r, tag)?;
        let tb = self.time_proj.forward(tape, store, temb, tag)?;
        let tb = tape.reshape(tb, &[c])?;
        let r = tape.add_channel_bias(r, tb)?;
        let r = self.norm2.apply(tape, store, r, g)?;
        let r = tape.silu(r);
        let r = self.conv2.forward(tape, store, r, tag)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(tape, store, h, tag)?,
            None => h,
        };
        let mut h = tape.add(s, r)?;

        // adaptive attention; its input tokens are the captured features
        let n = self.attn_norm.apply(tape, store, h, g)?;
        let n = tape.reshape(n, &[c, hh * ww])?;
        let n = tape.transpose(n)?;
        let p = tape.constant(pos.clone());
        let tokens = tape.add(n, p)?;
        let a = self.attn.forward(tape, store, tokens, reference, tag)?;
        let a = tape.transpose(a)?;
        let a = tape.reshape(a, &[c, hh, ww])?;
        h = tape.add(h, a)?;

        let n = self.cross_norm.apply(tape, store, h, g)?;
        let n = tape.reshape(n, &[c, hh * ww])?;
        let n = tape.transpose(n)?;
        let q = self.cross_q.forward(tape, store, n, tag)?;
        let k = self.cross_k.forward(tape, store, text, tag)?;
        let v = self.cross_v.forward(tape, store, text, tag)?;
        let a = tape.attention(q, k, v, cfg.heads)?;
        let a = self.cross_out.forward(tape, store, a, tag)?;
        let a = tape.transpose(a)?;
        let a = tape.reshape(a, &[c, hh, ww])?;
        h = tape.add(h, a)?;
        Ok((h, tokens))
    }
}

impl HasParams for Block {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ParamGroup)) {
        self.norm1.visit_params(f);
        self.conv1.visit_params(f);
        self.time_proj.visit_params(f);
        self.norm2.visit_params(f);
        self.conv2.visit_params(f);
        if let Some(s) = &self.skip {
            s.visit_params(f);
        }
        self.attn_norm.visit_params(f);
        self.attn.visit_params(f);
        self.cross_norm.visit_params(f);
        self.cross_q.visit_params(f);
        self.cross_k.visit_params(f);
        self.cross_v.visit_params(f);
        self.cross_out.visit_params(f);
    }
}

/// One captured feature tensor `[tokens × d_model]` per attention site, in
/// [`SITE_NAMES`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFeatureSet<T> {
    pub features: Vec<Tensor<T>>,
}

/// What a forward pass should do with the attention-site inputs.
enum Mode<'a> {
    Denoise(Option<&'a [Var]>),
    Encode,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: ModelConfig,
    time_fc1: GatedLinear,
    time_fc2: GatedLinear,
    null_text: ParamId,
    stem: GatedConv,
    down: GatedConv,
    up: GatedConv,
    blocks: Vec<Block>,
    out_norm: Norm,
    out_conv: GatedConv,
    pos: [Vec<f64>; 5],
}

impl UNet {
    /// Registers every parameter in `store` and returns the network.
    pub fn new<T: Real>(cfg: ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let lat = cfg.latent_shape()[0] * 4;
        let time_fc1 = GatedLinear::new(store, "time.fc1", cfg.time_dim, d, true, None, rng)?;
        let time_fc2 = GatedLinear::new(store, "time.fc2", d, d, true, None, rng)?;
        let null_text = store.insert(
            "null_text",
            crate::conditioning::uniform_tensor(&[1, cfg.d_text], 1.0, rng),
            ParamGroup::Base,
        )?;
        let stem = GatedConv::new(store, "stem", lat, d, 3, 1, None, rng)?;
        let mut blocks = Vec::new();
        blocks.push(Block::new(store, SITE_NAMES[0], d, &cfg, rng)?);
        let down = GatedConv::new(store, "downsample", d, d, 3, 2, None, rng)?;
        blocks.push(Block::new(store, SITE_NAMES[1], d, &cfg, rng)?);
        blocks.push(Block::new(store, SITE_NAMES[2], d, &cfg, rng)?);
        blocks.push(Block::new(store, SITE_NAMES[3], 2 * d, &cfg, rng)?);
        let up = GatedConv::new(store, "upsample", d, d, 3, 1, None, rng)?;
        blocks.push(Block::new(store, SITE_NAMES[4], 2 * d, &cfg, rng)?);
        let out_norm = Norm::new(store, "out_norm", d)?;
        let out_conv = GatedConv::new(store, "out_conv", d + lat, lat, 3, 1, None, rng)?;
        let sides = cfg.site_sides();
        let pos = sides.map(|s| positional_encoding(s, d));
        Ok(Self {
            cfg,
            time_fc1,
            time_fc2,
            null_text,
            stem,
            down,
            up,
            blocks,
            out_norm,
            out_conv,
            pos,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Adaptive attention block of site `i` (in [`SITE_NAMES`] order).
    pub fn site(&self, i: usize) -> &AdaptiveAttention {
        &self.blocks[i].attn
    }

    pub fn num_sites(&self) -> usize {
        self.blocks.len()
    }

    /// Re-initialises every adapter from the current frozen `W_k`, `W_v`.
    pub fn reset_adapters<T: Real>(&self, store: &mut ParamStore<T>) {
        for b in &self.blocks {
            b.attn.reset_adapters(store);
        }
    }

    pub fn partition<T: Real>(&self, store: &ParamStore<T>) -> Result<ParamPartition> {
        enumerate_trainable(store, &[self])
    }

    /// Noise prediction on a tape. `text` rows are `[n × d_text]`; `None`
    /// uses the learned null token. `refs` must hold one feature per site.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        z_t: Var,
        t: usize,
        text: Option<Var>,
        refs: Option<&[Var]>,
    ) -> Result<Var> {
        let (out, _) = self.run(tape, store, z_t, t, text, Mode::Denoise(refs), InputTag::LatentNoise)?;
        out.ok_or_else(|| Error::Contract("denoise produced no output".into()))
    }

    /// Gate-open pass at `t = 0` on a clean reference latent; returns the
    /// tokens entering each adaptive attention site.
    pub fn encode_reference_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ref_latent: Var,
    ) -> Result<Vec<Var>> {
        let (_, cap) = self.run(tape, store, ref_latent, 0, None, Mode::Encode, InputTag::ReferenceFeature)?;
        Ok(cap)
    }

    /// Same as [`UNet::encode_reference_var`] but with the gate forced
    /// closed; used to show the encoder reduces to the bare denoiser.
    pub fn trace_sites_var<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        latent: Var,
        tag: InputTag,
    ) -> Result<Vec<Var>> {
        let (_, cap) = self.run(tape, store, latent, 0, None, Mode::Encode, tag)?;
        Ok(cap)
    }

    pub fn encode_reference<T: Real>(
        &self,
        store: &ParamStore<T>,
        ref_latent: &Tensor<T>,
    ) -> Result<ReferenceFeatureSet<T>> {
        self.check_latent(ref_latent.shape())?;
        let mut tape = Tape::inference();
        let x = tape.constant(ref_latent.clone());
        let cap = self.encode_reference_var(&mut tape, store, x)?;
        Ok(ReferenceFeatureSet {
            features: cap.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }

    pub fn denoise<T: Real>(
        &self,
        store: &ParamStore<T>,
        z_t: &Tensor<T>,
        t: usize,
        text: Option<&Tensor<T>>,
        refs: Option<&ReferenceFeatureSet<T>>,
    ) -> Result<Tensor<T>> {
        self.check_latent(z_t.shape())?;
        let mut tape = Tape::inference();
        let z = tape.constant(z_t.clone());
        let text = text.map(|t| tape.constant(t.clone()));
        let refs: Option<Vec<Var>> = refs.map(|r| {
            r.features
                .iter()
                .map(|f| tape.constant(f.clone()))
                .collect()
        });
        let out = self.denoise_var(&mut tape, store, z, t, text, refs.as_deref())?;
        Ok(tape.value(out).clone())
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let want = self.cfg.latent_shape();
        if shape != want {
            return Err(Error::dim("unet input", shape, &want));
        }
        Ok(())
    }

    fn time_embedding<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, t: usize, tag: InputTag) -> Result<Var> {
        let half = self.cfg.time_dim / 2;
        let mut e = Vec::with_capacity(2 * half);
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            e.push((t as f64 * f).sin());
        }
        for j in 0..half {
            let f = (-(10000f64.ln()) * j as f64 / half as f64).exp();
            e.push((t as f64 * f).cos());
        }
        let s = tape.constant(Tensor::from_f64(&[1, 2 * half], &e)?);
        let h = self.time_fc1.forward(tape, store, s, tag)?;
        let h = tape.silu(h);
        let h = self.time_fc2.forward(tape, store, h, tag)?;
        Ok(tape.silu(h))
    }

    #[allow(clippy::too_many_arguments)]
    fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        t: usize,
        text: Option<Var>,
        mode: Mode<'_>,
        tag: InputTag,
    ) -> Result<(Option<Var>, Vec<Var>)> {
        self.check_latent(tape.shape(x))?;
        let d = self.cfg.d_model;
        let sides = self.cfg.site_sides();
        let refs = match mode {
            Mode::Denoise(Some(r)) => {
                if r.len() != self.blocks.len() {
                    return Err(Error::Contract(format!(
                        "reference feature set has {} entries, model has {} sites",
                        r.len(),
                        self.blocks.len()
                    )));
                }
                for (i, &v) in r.iter().enumerate() {
                    let want = [sides[i] * sides[i], d];
                    if tape.shape(v) != want {
                        return Err(Error::Contract(format!(
                            "reference feature `{}` has shape {:?}, expected {:?}",
                            SITE_NAMES[i],
                            tape.shape(v),
                            want
                        )));
                    }
                }
                Some(r)
            }
            _ => None,
        };
        let text = match text {
            Some(v) => {
                let [_, dt] = tape.value(v).dims2("text embedding")?;
                if dt != self.cfg.d_text {
                    return Err(Error::dim("text embedding", tape.shape(v), &[1, self.cfg.d_text]));
                }
                v
            }
            None => tape.param(store, self.null_text),
        };
        let encode = matches!(mode, Mode::Encode);
        let temb = self.time_embedding(tape, store, t, tag)?;
        let pos: Vec<Tensor<T>> = self
            .pos
            .iter()
            .zip(sides)
            .map(|(p, s)| Tensor::from_f64(&[s * s, d], p))
            .collect::<Result<_>>()?;
        let mut captured = Vec::with_capacity(self.blocks.len());
        let mut step = |i: usize, h: Var, tape: &mut Tape<T>| -> Result<Var> {
            let r = refs.map(|r| r[i]);
            let (h, tokens) = self.blocks[i].forward(tape, store, &self.cfg, h, temb, text, &pos[i], r, tag)?;
            captured.push(tokens);
            Ok(h)
        };

        let input = tape.space_to_depth(x, 2)?;
        let h = self.stem.forward(tape, store, input, tag)?;
        let s1 = step(0, h, tape)?;
        let h = self.down.forward(tape, store, s1, tag)?;
        let s2 = step(1, h, tape)?;
        let h = step(2, s2, tape)?;
        let h = tape.concat(&[h, s2])?;
        let h = step(3, h, tape)?;
        let h = tape.upsample2x(h)?;
        let h = self.up.forward(tape, store, h, tag)?;
        let h = tape.concat(&[h, s1])?;
        let h = step(4, h, tape)?;
        if encode {
            return Ok((None, captured));
        }
        let h = self.out_norm.apply(tape, store, h, self.cfg.groups)?;
        let h = tape.silu(h);
        // long skip: the head sees the raw input next to the features
        let h = tape.concat(&[h, input])?;
        let h = self.out_conv.forward(tape, store, h, tag)?;
        let out = tape.depth_to_space(h, 2)?;
        Ok((Some(out), captured))
    }
}

impl HasParams for UNet {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ParamGroup)) {
        self.time_fc1.visit_params(f);
        self.time_fc2.visit_params(f);
        f(self.null_text, ParamGroup::Base);
        self.stem.visit_params(f);
        self.down.visit_params(f);
        self.up.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.out_norm.visit_params(f);
        self.out_conv.visit_params(f);
    }
}

/// Fixed 2-D sinusoidal encoding `[side² × d]`: the first half of the
/// channels encode the row, the second half the column.
fn positional_encoding(side: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(side * side * d);
    for y in 0..side {
        for x in 0..side {
            for (coord, width) in [(y, half), (x, d - half)] {
                for j in 0..width {
                    let f = 1.0 / 100f64.powf((j / 2 * 2) as f64 / width as f64);
                    let a = coord as f64 * f;
                    out.push(if j % 2 == 0 { a.sin() } else { a.cos() });
                }
            }
        }
    }
    out
}

/// Conditions for one sampling run. The unconditional branch always drops
/// both text and reference.
#[derive(Clone, Debug)]
pub struct Conditioning<T> {
    pub text: Option<Tensor<T>>,
    pub refs: Option<ReferenceFeatureSet<T>>,
}

/// A frozen model bound to its conditions, usable by the DDIM sampler.
pub struct GuidedModel<'a, T: Real> {
    pub unet: &'a UNet,
    pub store: &'a ParamStore<T>,
    pub cond: Conditioning<T>,
}

impl<T: Real> NoisePredictor<T> for GuidedModel<'_, T> {
    fn predict(&self, z_t: &Tensor<T>, t: usize, branch: Branch) -> Result<Tensor<T>> {
        match branch {
            Branch::Conditional => {
                self.unet
                    .denoise(self.store, z_t, t, self.cond.text.as_ref(), self.cond.refs.as_ref())
            }
            Branch::Unconditional => self.unet.denoise(self.store, z_t, t, None, None),
        }
    }
}
