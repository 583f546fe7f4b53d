//! Central finite-difference gradient checking in `f64`.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst `|tape - fd| / (max(|tape|, |fd|) + 1e-8)` over all checked elements.
    pub max_rel_error: f64,
    /// Parameter holding the worst element.
    pub worst_param: String,
    pub worst_index: usize,
    /// Tape and finite-difference values at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Compares tape gradients of a scalar `loss_fn` against fourth-order
/// central differences
/// `(f(p-2h) - 8f(p-h) + 8f(p+h) - f(p+2h)) / 12h` for every element of
/// every trainable parameter in `store`.
///
/// `loss_fn` must be deterministic; it is called once on a recording tape
/// and four times per element on inference tapes.
pub fn grad_check<F>(store: &mut ParamStore<f64>, h: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    tape.backward(loss)?;
    let ids = store.trainable_ids();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.param_grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; store.value(id).numel()])
        })
        .collect();
    drop(tape);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let l = loss_fn(&mut t, store)?;
        let v = t.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric {
                op: "grad_check",
                detail: format!("loss evaluated to {v}"),
            });
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    for (&id, grad) in ids.iter().zip(&analytic) {
        for j in 0..grad.len() {
            let orig = store.value(id).data()[j];
            let mut at = |store: &mut ParamStore<f64>, k: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[j] = orig + k * h;
                eval(store)
            };
            let (fm2, fm1, fp1, fp2) = (at(store, -2.0)?, at(store, -1.0)?, at(store, 1.0)?, at(store, 2.0)?);
            store.value_mut(id).data_mut()[j] = orig;
            let fd = (fm2 - 8.0 * fm1 + 8.0 * fp1 - fp2) / (12.0 * h);
            let rel = (grad[j] - fd).abs() / (grad[j].abs().max(fd.abs()) + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.get(id).name.clone();
                report.worst_index = j;
                report.worst_pair = (grad[j], fd);
            }
        }
    }
    Ok(report)
}
