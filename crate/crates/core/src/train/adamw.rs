//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of `param` in place. `step` is 1-based.
///
/// `p ← p·(1 − lr·λ) − lr · m̂ / (√v̂ + ε)` with bias-corrected moments.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(Error::dim("adamw_step", &[param.len()], &[grad.len(), m.len(), v.len()]));
    }
    if step == 0 {
        return Err(Error::Contract("adamw step counter starts at 1".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.as_f64().is_finite()) {
        return Err(Error::Numeric {
            op: "adamw_step",
            detail: format!("non-finite gradient at element {i}"),
        });
    }
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::of(1.0 - cfg.beta2.powi(step as i32));
    let decay = T::of(1.0 - lr * cfg.weight_decay);
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] = param[i] * decay - lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamWConfig {
        AdamWConfig { weight_decay: 0.0, ..Default::default() }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![1.5f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &no_decay()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_matches_reference_trace() {
        // independent scalar re-derivation over three steps
        let cfg = no_decay();
        let grads = [1.0, 0.5, -2.0];
        let mut p = vec![0.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let (mut rm, mut rv, mut rp) = (0.0f64, 0.0f64, 0.0f64);
        for (k, &g) in grads.iter().enumerate() {
            let t = k as i32 + 1;
            adamw_step(&mut p, &[g], &mut m, &mut v, t as u64, 0.1, &cfg).unwrap();
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            rp -= 0.1 * (rm / (1.0 - 0.9f64.powi(t))) / ((rv / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((p[0] - rp).abs() < 1e-12);
            if k == 0 {
                assert!((p[0] + 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_times_decay() {
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut p = vec![2.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        adamw_step(&mut p, &[0.0], &mut m, &mut v, 1, 0.01, &cfg).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![0.0f32];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        assert!(adamw_step(&mut p, &[f32::NAN], &mut m, &mut v, 1, 0.1, &no_decay()).is_err());
        assert_eq!(p, vec![0.0]);
    }
}
