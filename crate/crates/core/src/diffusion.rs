//! Noise schedule, forward noising, the ε-prediction loss, classifier-free
//! guidance and deterministic DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_SAMPLING_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
/// Bound on the predicted clean latent during sampling; matches the codec range.
pub const DEFAULT_X0_CLIP: f64 = 1.0;

/// Cumulative signal coefficients `alpha_bar[t-1]` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(beta_start..1.0).contains(&beta_end) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 <= start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("beta {b} outside [0, 1)")));
            }
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn default_schedule() -> Self {
        Self::linear(DEFAULT_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar` at timestep `t` (1-based); `t = 0` is the clean signal.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::Index(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            ))),
        }
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Uniform sub-schedule of `num_steps` timesteps in descending order,
    /// ending at `t = 1`.
    pub fn sub_schedule(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps == 0 || num_steps > self.steps() {
            return Err(Error::Config(format!(
                "num_steps {num_steps} must lie in 1..={}",
                self.steps()
            )));
        }
        let stride = self.steps() / num_steps;
        Ok((0..num_steps).rev().map(|i| 1 + i * stride).collect())
    }
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_diffuse<T: Real>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::dim("forward_diffuse", z0.shape(), eps.shape()));
    }
    if t == 0 {
        return Err(Error::Index("timestep 0 is not a noising step".into()));
    }
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| a * z + b * e)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}

/// Mean squared error over all elements.
pub fn diffusion_loss<T: Real>(eps_true: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<T> {
    if eps_true.shape() != eps_pred.shape() {
        return Err(Error::dim("diffusion_loss", eps_true.shape(), eps_pred.shape()));
    }
    let n = T::of(eps_true.numel() as f64);
    let s = eps_true
        .data()
        .iter()
        .zip(eps_pred.data())
        .fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
    Ok(s / n)
}

/// Guided prediction `w * cond + (1 - w) * uncond`.
pub fn cfg_combine<T: Real>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::dim("cfg_combine", eps_cond.shape(), eps_uncond.shape()));
    }
    let (wc, wu) = (T::of(w), T::of(1.0 - w));
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| wc * c + wu * u)
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f64,
    pub num_steps: usize,
    /// Clamp the predicted clean latent to `[-c, c]` at every step and
    /// re-derive the noise estimate from it. `None` runs the plain update.
    #[serde(default)]
    pub clip_x0: Option<f64>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: DEFAULT_GUIDANCE,
            num_steps: DEFAULT_SAMPLING_STEPS,
            clip_x0: Some(DEFAULT_X0_CLIP),
        }
    }
}

/// Which branch of classifier-free guidance a prediction is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Anything that predicts the noise in `z_t`.
pub trait NoisePredictor<T: Real> {
    fn predict(&self, z_t: &Tensor<T>, t: usize, branch: Branch) -> Result<Tensor<T>>;
}

/// Deterministic (eta = 0) DDIM with classifier-free guidance at every step.
///
/// `z_start` is treated as the latent at the first (largest) timestep of the
/// sub-schedule. The returned tensor is the final clean-latent estimate.
pub fn ddim_sample<T: Real, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    z_start: &Tensor<T>,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    ddim_sample_traced(model, z_start, guidance, sched, |_, _| {})
}

/// [`ddim_sample`] with a callback invoked after each step with the new
/// timestep and latent.
pub fn ddim_sample_traced<T: Real, M: NoisePredictor<T> + ?Sized>(
    model: &M,
    z_start: &Tensor<T>,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
    mut on_step: impl FnMut(usize, &Tensor<T>),
) -> Result<Tensor<T>> {
    let steps = sched.sub_schedule(guidance.num_steps)?;
    let mut z = z_start.clone();
    for (i, &t) in steps.iter().enumerate() {
        let t_next = steps.get(i + 1).copied().unwrap_or(0);
        let cond = model.predict(&z, t, Branch::Conditional)?;
        let uncond = model.predict(&z, t, Branch::Unconditional)?;
        for e in [&cond, &uncond] {
            if e.shape() != z.shape() {
                return Err(Error::Contract(format!(
                    "noise prediction shape {:?} != latent shape {:?}",
                    e.shape(),
                    z.shape()
                )));
            }
        }
        let eps = cfg_combine(&cond, &uncond, guidance.w)?;
        z = match guidance.clip_x0 {
            Some(c) => ddim_step_clipped(&z, &eps, t, t_next, sched, c)?,
            None => ddim_step(&z, &eps, t, t_next, sched)?,
        };
        on_step(t_next, &z);
    }
    Ok(z)
}

/// One DDIM update from `t` to `t_next` given a noise estimate.
pub fn ddim_step<T: Real>(
    z: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t)?;
    let ab_next = sched.alpha_bar(t_next)?;
    let (sa, sb) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let (na, nb) = (T::of(ab_next.sqrt()), T::of((1.0 - ab_next).sqrt()));
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zt, &e)| {
            let x0 = (zt - sb * e) / sa;
            na * x0 + nb * e
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}

/// [`ddim_step`] with the clean-latent estimate clamped to `[-clip, clip]`;
/// the noise estimate is recomputed from the clamped value before renoising.
pub fn ddim_step_clipped<T: Real>(
    z: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule,
    clip: f64,
) -> Result<Tensor<T>> {
    if !(clip > 0.0) {
        return Err(Error::Config(format!("x0 clip bound must be positive, got {clip}")));
    }
    let ab = sched.alpha_bar(t)?;
    let ab_next = sched.alpha_bar(t_next)?;
    let (sa, sb) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    let (na, nb) = (T::of(ab_next.sqrt()), T::of((1.0 - ab_next).sqrt()));
    let (lo, hi) = (T::of(-clip), T::of(clip));
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&zt, &e)| {
            let x0 = (zt - sb * e) / sa;
            let x0c = if x0 < lo { lo } else if x0 > hi { hi } else { x0 };
            let e = if x0c == x0 { e } else { (zt - sa * x0c) / sb };
            na * x0c + nb * e
        })
        .collect();
    Tensor::new(z.shape().to_vec(), data)
}
