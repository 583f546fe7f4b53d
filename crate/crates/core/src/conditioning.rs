//! Gated LoRA layers and adaptive attention.
//!
//! A gated layer computes `h = φ(x) + I(x)·ΔW(x)` where the gate `I` is
//! open only for inputs tagged [`InputTag::ReferenceFeature`]. On the
//! latent-noise path the low-rank branch is not evaluated at all, so that
//! path is bit-identical to the layer without LoRA.
//!
//! Adaptive attention adds a second softmax term whose keys and values come
//! from reference features through trainable adapters `W'_k`, `W'_v`:
//! `Softmax(Q Kᵀ/√d) V + Softmax(Q K'ᵀ/√d) V'`, row-vector convention
//! (tokens are rows, `Q = z · W_q`).

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Which stream an activation belongs to; selects the gate state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputTag {
    /// `z_t` path: gate closed.
    LatentNoise,
    /// `c_i` path: gate open.
    ReferenceFeature,
}

impl InputTag {
    pub fn gate_open(self) -> bool {
        matches!(self, InputTag::ReferenceFeature)
    }
}

/// Anything that owns parameters and can report them with their group.
pub trait HasParams {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ParamGroup));
}

/// Low-rank factors `ΔW = B·A`, `A: r×k`, `B: d×r`. No `α/r` scaling.
#[derive(Clone, Debug)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl Lora {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        rank: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Kaiming-uniform A, zero B: the delta is exactly zero at init.
        let bound = 1.0 / (fan_in as f64).sqrt();
        let a = uniform_tensor(&[rank, fan_in], bound, rng);
        let a = store.insert(&format!("{name}.lora_a"), a, ParamGroup::Lora)?;
        let b = store.insert(
            &format!("{name}.lora_b"),
            Tensor::zeros(&[fan_out, rank]),
            ParamGroup::Lora,
        )?;
        Ok(Self { a, b, rank })
    }
}

pub(crate) fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Frozen linear map (`x[n×d_in] · W[d_in×d_out] + b`) with an optional gated LoRA branch.
#[derive(Clone, Debug)]
pub struct GatedLinear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<Lora>,
    pub d_in: usize,
    pub d_out: usize,
}

impl GatedLinear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        lora_rank: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.insert(
            &format!("{name}.weight"),
            uniform_tensor(&[d_in, d_out], bound, rng),
            ParamGroup::Base,
        )?;
        let bias = if bias {
            Some(store.insert(
                &format!("{name}.bias"),
                Tensor::zeros(&[d_out]),
                ParamGroup::Base,
            )?)
        } else {
            None
        };
        let lora = match lora_rank {
            Some(r) => Some(Lora::new(store, name, r, d_in, d_out, rng)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            lora,
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        tag: InputTag,
    ) -> Result<Var> {
        let [_, d] = tape.value(x).dims2("gated_linear")?;
        if d != self.d_in {
            return Err(Error::dim("gated_linear", tape.shape(x), &[self.d_in, self.d_out]));
        }
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul(x, w)?;
        if let Some(b) = self.bias {
            let b = tape.param(store, b);
            y = tape.add_row_bias(y, b)?;
        }
        if let (true, Some(l)) = (tag.gate_open(), &self.lora) {
            let a = tape.param(store, l.a);
            let b = tape.param(store, l.b);
            // x·Aᵀ·Bᵀ = (B·A·xᵀ)ᵀ
            let xa = tape.matmul_t(x, a, false, true)?;
            let delta = tape.matmul_t(xa, b, false, true)?;
            y = tape.add(y, delta)?;
        }
        Ok(y)
    }
}

impl HasParams for GatedLinear {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ParamGroup)) {
        f(self.weight, ParamGroup::Base);
        if let Some(b) = self.bias {
            f(b, ParamGroup::Base);
        }
        if let Some(l) = &self.lora {
            f(l.a, ParamGroup::Lora);
            f(l.b, ParamGroup::Lora);
        }
    }
}

/// Frozen convolution with an optional gated LoRA branch factorised over
/// the flattened `C_in·k·k` patch dimension.
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub lora: Option<Lora>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl GatedConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        lora_rank: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel size must be odd")));
        }
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.insert(
            &format!("{name}.weight"),
            uniform_tensor(&[c_out, c_in, kernel, kernel], bound, rng),
            ParamGroup::Base,
        )?;
        let bias = Some(store.insert(
            &format!("{name}.bias"),
            Tensor::zeros(&[c_out]),
            ParamGroup::Base,
        )?);
        let lora = match lora_rank {
            Some(r) => Some(Lora::new(store, name, r, fan_in, c_out, rng)?),
            None => None,
        };
        Ok(Self {
            weight,
            bias,
            lora,
            c_in,
            c_out,
            kernel,
            stride,
            pad: (kernel - 1) / 2,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        tag: InputTag,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        let (cols, ho, wo) = tape.conv_cols(x, w, self.stride, self.pad)?;
        let y = tape.conv_from_cols(cols, w, b, ho, wo)?;
        match (tag.gate_open(), &self.lora) {
            (true, Some(l)) => {
                let a = tape.param(store, l.a);
                let bm = tape.param(store, l.b);
                let ac = tape.matmul(a, cols)?;
                let delta = tape.matmul(bm, ac)?;
                let delta = tape.reshape(delta, &[self.c_out, ho, wo])?;
                tape.add(y, delta)
            }
            _ => Ok(y),
        }
    }
}

impl HasParams for GatedConv {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ParamGroup)) {
        f(self.weight, ParamGroup::Base);
        if let Some(b) = self.bias {
            f(b, ParamGroup::Base);
        }
        if let Some(l) = &self.lora {
            f(l.a, ParamGroup::Lora);
            f(l.b, ParamGroup::Lora);
        }
    }
}

/// Self-attention over latent tokens plus an adapter-projected term over
/// reference features.
#[derive(Clone, Debug)]
pub struct AdaptiveAttention {
    pub q: GatedLinear,
    pub k: GatedLinear,
    pub v: GatedLinear,
    /// Frozen output projection applied after the two-term sum.
    pub out: GatedLinear,
    pub adapter_k: ParamId,
    pub adapter_v: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl AdaptiveAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        lora_rank: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: d_model {d_model} not divisible by {heads} heads"
            )));
        }
        let q = GatedLinear::new(store, &format!("{name}.to_q"), d_model, d_model, false, lora_rank, rng)?;
        let k = GatedLinear::new(store, &format!("{name}.to_k"), d_model, d_model, false, lora_rank, rng)?;
        let v = GatedLinear::new(store, &format!("{name}.to_v"), d_model, d_model, false, lora_rank, rng)?;
        let out = GatedLinear::new(store, &format!("{name}.to_out"), d_model, d_model, true, lora_rank, rng)?;
        // Adapters start as copies of the frozen key/value projections.
        let adapter_k = store.insert(
            &format!("{name}.adapter_k"),
            store.value(k.weight).clone(),
            ParamGroup::Adapter,
        )?;
        let adapter_v = store.insert(
            &format!("{name}.adapter_v"),
            store.value(v.weight).clone(),
            ParamGroup::Adapter,
        )?;
        Ok(Self {
            q,
            k,
            v,
            out,
            adapter_k,
            adapter_v,
            heads,
            d_model,
        })
    }

    /// Re-copies `W_k`, `W_v` into the adapters (after the base weights change).
    pub fn reset_adapters<T: Real>(&self, store: &mut ParamStore<T>) {
        let k = store.value(self.k.weight).clone();
        let v = store.value(self.v.weight).clone();
        *store.value_mut(self.adapter_k) = k;
        *store.value_mut(self.adapter_v) = v;
    }

    /// The two-term attention sum (before the output projection).
    ///
    /// With `refs = None` the second term is skipped entirely.
    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        refs: Option<Var>,
        tag: InputTag,
    ) -> Result<Var> {
        let q = self.q.forward(tape, store, tokens, tag)?;
        let k = self.k.forward(tape, store, tokens, tag)?;
        let v = self.v.forward(tape, store, tokens, tag)?;
        let mut out = tape.attention(q, k, v, self.heads)?;
        if let Some(c) = refs {
            let [_, dc] = tape.value(c).dims2("adaptive_attention")?;
            if dc != self.d_model {
                return Err(Error::dim("adaptive_attention", tape.shape(c), tape.shape(tokens)));
            }
            let wk = tape.param(store, self.adapter_k);
            let wv = tape.param(store, self.adapter_v);
            let kp = tape.matmul(c, wk)?;
            let vp = tape.matmul(c, wv)?;
            let second = tape.attention(q, kp, vp, self.heads)?;
            out = tape.add(out, second)?;
        }
        Ok(out)
    }

    /// Two-term sum followed by the output projection.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        tokens: Var,
        refs: Option<Var>,
        tag: InputTag,
    ) -> Result<Var> {
        let s = self.attend(tape, store, tokens, refs, tag)?;
        self.out.forward(tape, store, s, tag)
    }
}

impl HasParams for AdaptiveAttention {
    fn visit_params(&self, f: &mut dyn FnMut(ParamId, ParamGroup)) {
        self.q.visit_params(f);
        self.k.visit_params(f);
        self.v.visit_params(f);
        self.out.visit_params(f);
        f(self.adapter_k, ParamGroup::Adapter);
        f(self.adapter_v, ParamGroup::Adapter);
    }
}

/// `Softmax(QKᵀ/√d)V + Softmax(QK'ᵀ/√d)V'` for latent hidden states
/// `z_hidden[n×d]` and reference features `c_i[m×d]`.
pub fn adaptive_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &AdaptiveAttention,
    z_hidden: Var,
    c_i: Var,
) -> Result<Var> {
    block.attend(tape, store, z_hidden, Some(c_i), InputTag::LatentNoise)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct GroupCounts {
    pub base: usize,
    pub lora: usize,
    pub adapter: usize,
}

impl GroupCounts {
    pub fn total(&self) -> usize {
        self.base + self.lora + self.adapter
    }
}

/// All parameters split by group.
#[derive(Clone, Debug, Default)]
pub struct ParamPartition {
    pub frozen_base: Vec<ParamId>,
    pub lora: Vec<ParamId>,
    pub adapter: Vec<ParamId>,
    pub counts: GroupCounts,
}

/// Partitions every parameter in `store` by walking `layers`.
///
/// Fails if a parameter is claimed twice, claimed under a group different
/// from the one it was registered with, or never claimed at all.
pub fn enumerate_trainable<T: Real>(
    store: &ParamStore<T>,
    layers: &[&dyn HasParams],
) -> Result<ParamPartition> {
    let mut claimed: HashMap<ParamId, ParamGroup> = HashMap::new();
    let mut err = None;
    let mut part = ParamPartition::default();
    for layer in layers {
        layer.visit_params(&mut |id, group| {
            if err.is_some() {
                return;
            }
            if let Some(prev) = claimed.insert(id, group) {
                err = Some(Error::Integrity(format!(
                    "parameter `{}` claimed twice ({prev:?} and {group:?})",
                    store.get(id).name
                )));
                return;
            }
            let e = store.get(id);
            if e.group != group {
                err = Some(Error::Integrity(format!(
                    "parameter `{}` registered as {:?} but claimed as {group:?}",
                    e.name, e.group
                )));
                return;
            }
            let n = e.value.numel();
            match group {
                ParamGroup::Base => {
                    part.frozen_base.push(id);
                    part.counts.base += n;
                }
                ParamGroup::Lora => {
                    part.lora.push(id);
                    part.counts.lora += n;
                }
                ParamGroup::Adapter => {
                    part.adapter.push(id);
                    part.counts.adapter += n;
                }
            }
        });
    }
    if let Some(e) = err {
        return Err(e);
    }
    if let Some((_, e)) = store.entries().find(|(id, _)| !claimed.contains_key(id)) {
        return Err(Error::Integrity(format!(
            "parameter `{}` is not owned by any layer",
            e.name
        )));
    }
    Ok(part)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn randomize(store: &mut ParamStore<f64>, ids: &[ParamId], seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        for &id in ids {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) = uniform_tensor(&shape, 0.5, &mut r);
        }
    }

    #[test]
    fn closed_gate_is_bit_exact_base() {
        let mut s = ParamStore::<f64>::new();
        let l = GatedLinear::new(&mut s, "l", 5, 3, true, Some(2), &mut rng()).unwrap();
        let lo = l.lora.clone().unwrap();
        randomize(&mut s, &[lo.a, lo.b], 1);
        let mut bare = ParamStore::<f64>::new();
        let lb = GatedLinear::new(&mut bare, "l", 5, 3, true, None, &mut rng()).unwrap();
        *bare.value_mut(lb.weight) = s.value(l.weight).clone();

        let x = uniform_tensor(&[4, 5], 1.0, &mut rng());
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = l.forward(&mut t, &s, xv, InputTag::LatentNoise).unwrap();
        let mut tb = Tape::new();
        let xb = tb.constant(x);
        let yb = lb.forward(&mut tb, &bare, xb, InputTag::LatentNoise).unwrap();
        assert_eq!(t.value(y), tb.value(yb));
    }

    #[test]
    fn zero_b_is_transparent_on_reference_path() {
        let mut s = ParamStore::<f64>::new();
        let l = GatedLinear::new(&mut s, "l", 4, 4, false, Some(2), &mut rng()).unwrap();
        let x = uniform_tensor(&[3, 4], 1.0, &mut rng());
        let mut t = Tape::new();
        let xv = t.constant(x);
        let a = l.forward(&mut t, &s, xv, InputTag::LatentNoise).unwrap();
        let b = l.forward(&mut t, &s, xv, InputTag::ReferenceFeature).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn hand_matrix_example() {
        let mut s = ParamStore::<f64>::new();
        let l = GatedLinear::new(&mut s, "l", 2, 2, false, Some(1), &mut rng()).unwrap();
        let lo = l.lora.clone().unwrap();
        *s.value_mut(l.weight) = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        *s.value_mut(lo.a) = Tensor::from_f64(&[1, 2], &[1., 0.]).unwrap();
        *s.value_mut(lo.b) = Tensor::from_f64(&[2, 1], &[1., 2.]).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_f64(&[1, 2], &[3., 4.]).unwrap());
        let y = l.forward(&mut t, &s, x, InputTag::ReferenceFeature).unwrap();
        assert_eq!(t.value(y).data(), &[6., 10.]);
        let y = l.forward(&mut t, &s, x, InputTag::LatentNoise).unwrap();
        assert_eq!(t.value(y).data(), &[3., 4.]);
    }

    #[test]
    fn conv_lora_matches_dense_delta() {
        // ΔW = B·A reshaped to a kernel must equal the low-rank branch.
        let mut s = ParamStore::<f64>::new();
        let c = GatedConv::new(&mut s, "c", 2, 3, 3, 1, Some(2), &mut rng()).unwrap();
        let lo = c.lora.clone().unwrap();
        randomize(&mut s, &[lo.b], 3);
        let x = uniform_tensor(&[2, 5, 5], 1.0, &mut rng());

        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = c.forward(&mut t, &s, xv, InputTag::ReferenceFeature).unwrap();

        let a = s.value(lo.a);
        let b = s.value(lo.b);
        let w = s.value(c.weight);
        let mut merged = w.data().to_vec();
        for o in 0..3 {
            for j in 0..18 {
                merged[o * 18 + j] += (0..2).map(|r| b.data()[o * 2 + r] * a.data()[r * 18 + j]).sum::<f64>();
            }
        }
        let mut t2 = Tape::new();
        let xv2 = t2.constant(x);
        let wk = t2.constant(Tensor::new(vec![3, 2, 3, 3], merged).unwrap());
        let y2 = t2.conv2d(xv2, wk, None, 1, 1).unwrap();
        for (p, q) in t.value(y).data().iter().zip(t2.value(y2).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut s = ParamStore::<f64>::new();
        let l = GatedLinear::new(&mut s, "l", 4, 4, false, None, &mut rng()).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        assert!(l.forward(&mut t, &s, x, InputTag::LatentNoise).is_err());
    }

    fn standard_self_attention(t: &mut Tape<f64>, s: &ParamStore<f64>, b: &AdaptiveAttention, x: Var) -> Var {
        b.attend(t, s, x, None, InputTag::LatentNoise).unwrap()
    }

    #[test]
    fn adapter_init_doubles_self_attention() {
        let mut s = ParamStore::<f64>::new();
        let b = AdaptiveAttention::new(&mut s, "a", 8, 2, Some(2), &mut rng()).unwrap();
        assert_eq!(s.value(b.adapter_k), s.value(b.k.weight));
        assert_eq!(s.value(b.adapter_v), s.value(b.v.weight));
        let z = uniform_tensor(&[5, 8], 1.0, &mut rng());
        let mut t = Tape::new();
        let zv = t.constant(z);
        let both = adaptive_attention(&mut t, &s, &b, zv, zv).unwrap();
        let single = standard_self_attention(&mut t, &s, &b, zv);
        for (p, q) in t.value(both).data().iter().zip(t.value(single).data()) {
            assert!((p - 2.0 * q).abs() < 1e-6);
        }
    }

    #[test]
    fn singleton_identity_example() {
        let mut s = ParamStore::<f64>::new();
        let b = AdaptiveAttention::new(&mut s, "a", 1, 1, None, &mut rng()).unwrap();
        for id in [b.q.weight, b.k.weight, b.v.weight, b.adapter_k, b.adapter_v] {
            *s.value_mut(id) = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        }
        let mut t = Tape::new();
        let z = t.constant(Tensor::from_f64(&[1, 1], &[0.7]).unwrap());
        let c = t.constant(Tensor::from_f64(&[1, 1], &[-2.5]).unwrap());
        let y = adaptive_attention(&mut t, &s, &b, z, c).unwrap();
        assert!((t.value(y).data()[0] - (0.7 - 2.5)).abs() < 1e-12);
    }

    /// Direct dense-formula oracle for one head.
    fn oracle(z: &[f64], c: &[f64], n: usize, m: usize, d: usize, w: [&[f64]; 5]) -> Vec<f64> {
        let proj = |x: &[f64], rows: usize, wm: &[f64]| -> Vec<f64> {
            let mut o = vec![0.0; rows * d];
            for i in 0..rows {
                for j in 0..d {
                    for k in 0..d {
                        o[i * d + j] += x[i * d + k] * wm[k * d + j];
                    }
                }
            }
            o
        };
        let (q, k, v, kp, vp) = (
            proj(z, n, w[0]),
            proj(z, n, w[1]),
            proj(z, n, w[2]),
            proj(c, m, w[3]),
            proj(c, m, w[4]),
        );
        let att = |kk: &[f64], vv: &[f64], rows: usize| -> Vec<f64> {
            let mut o = vec![0.0; n * d];
            for i in 0..n {
                let logits: Vec<f64> = (0..rows)
                    .map(|j| (0..d).map(|e| q[i * d + e] * kk[j * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for j in 0..rows {
                    for e in 0..d {
                        o[i * d + e] += ex[j] / z * vv[j * d + e];
                    }
                }
            }
            o
        };
        let a = att(&k, &v, n);
        let b = att(&kp, &vp, m);
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    }

    #[test]
    fn random_one_head_matches_dense_oracle() {
        let mut s = ParamStore::<f64>::new();
        let b = AdaptiveAttention::new(&mut s, "a", 4, 1, None, &mut rng()).unwrap();
        randomize(&mut s, &[b.adapter_k, b.adapter_v], 11);
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let z = uniform_tensor::<f64>(&[2, 4], 1.0, &mut r);
        let c = uniform_tensor::<f64>(&[3, 4], 1.0, &mut r);
        let ws = [b.q.weight, b.k.weight, b.v.weight, b.adapter_k, b.adapter_v].map(|id| s.value(id).data().to_vec());
        let expect = oracle(z.data(), c.data(), 2, 3, 4, [&ws[0], &ws[1], &ws[2], &ws[3], &ws[4]]);
        let mut t = Tape::new();
        let zv = t.constant(z);
        let cv = t.constant(c);
        let y = adaptive_attention(&mut t, &s, &b, zv, cv).unwrap();
        for (p, q) in t.value(y).data().iter().zip(&expect) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_width_mismatch_errors() {
        let mut s = ParamStore::<f64>::new();
        let b = AdaptiveAttention::new(&mut s, "a", 4, 2, None, &mut rng()).unwrap();
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[2, 4]));
        let c = t.constant(Tensor::zeros(&[2, 3]));
        assert!(adaptive_attention(&mut t, &s, &b, z, c).is_err());
    }

    #[test]
    fn lora_and_adapter_counts() {
        let mut s = ParamStore::<f32>::new();
        let l = GatedLinear::new(&mut s, "l", 64, 64, false, Some(8), &mut rng()).unwrap();
        let p = enumerate_trainable(&s, &[&l]).unwrap();
        assert_eq!(p.counts.lora, 8 * (64 + 64));
        assert_eq!(p.counts.lora, 1024);

        let mut s = ParamStore::<f32>::new();
        let a = AdaptiveAttention::new(&mut s, "a", 64, 4, None, &mut rng()).unwrap();
        let p = enumerate_trainable(&s, &[&a]).unwrap();
        assert_eq!(p.counts.adapter, 2 * 64 * 64);
        assert_eq!(p.counts.lora, 0);
    }

    #[test]
    fn double_claim_is_integrity_error() {
        let mut s = ParamStore::<f32>::new();
        let l = GatedLinear::new(&mut s, "l", 4, 4, false, Some(2), &mut rng()).unwrap();
        assert!(matches!(enumerate_trainable(&s, &[&l, &l]), Err(Error::Integrity(_))));
        let mut s2 = s.clone();
        s2.insert("orphan", Tensor::zeros(&[1]), ParamGroup::Base).unwrap();
        assert!(matches!(enumerate_trainable(&s2, &[&l]), Err(Error::Integrity(_))));
    }

    #[test]
    fn full_rank_lora_fits_any_dense_delta() {
        // r = min(d_in, d_out) on a 4×4 layer: fit a random delta by gradient descent.
        let mut s = ParamStore::<f64>::new();
        let l = GatedLinear::new(&mut s, "l", 4, 4, false, Some(4), &mut rng()).unwrap();
        let lo = l.lora.clone().unwrap();
        *s.value_mut(l.weight) = Tensor::zeros(&[4, 4]);
        s.set_trainable(|g| g == ParamGroup::Lora);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let target_w = uniform_tensor::<f64>(&[4, 4], 1.0, &mut r);
        let x = uniform_tensor::<f64>(&[32, 4], 1.0, &mut r);
        // target rows: x · target_w
        let mut tt = Tape::<f64>::new();
        let xv = tt.constant(x.clone());
        let wv = tt.constant(target_w);
        let yv = tt.matmul(xv, wv).unwrap();
        let target = tt.value(yv).clone();
        *s.value_mut(lo.b) = uniform_tensor(&[4, 4], 0.1, &mut r);
        let mut loss = f64::MAX;
        for _ in 0..4000 {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let tv = t.constant(target.clone());
            let y = l.forward(&mut t, &s, xv, InputTag::ReferenceFeature).unwrap();
            let lv = t.mse(y, tv).unwrap();
            loss = t.value(lv).data()[0];
            t.backward(lv).unwrap();
            let ga = t.param_grad(lo.a).unwrap().to_vec();
            let gb = t.param_grad(lo.b).unwrap().to_vec();
            for (p, g) in s.value_mut(lo.a).data_mut().iter_mut().zip(ga) {
                *p -= 0.1 * g;
            }
            for (p, g) in s.value_mut(lo.b).data_mut().iter_mut().zip(gb) {
                *p -= 0.1 * g;
            }
        }
        assert!(loss < 1e-6, "final mse {loss}");
    }
}
