use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::{Error, Result};

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are judged by absolute error instead.
const REL_FLOOR: f64 = 1e-6;

/// A scalar loss over a parameter store with an analytic gradient.
pub trait Differentiable {
    fn loss(&self, store: &ParamStore) -> f64;

    /// Returns the loss and accumulates `∂loss/∂param` into the store's grad buffers.
    fn loss_and_grad(&self, store: &mut ParamStore) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub n_checked: usize,
    pub pass: bool,
}

/// Compares analytic gradients with central differences for every scalar in `store`.
pub fn grad_check(
    net: &dyn Differentiable,
    store: &mut ParamStore,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::GradCheck(format!("step size must be positive, got {h}")));
    }
    store.zero_grad();
    let base = net.loss_and_grad(store);
    if !base.is_finite() {
        return Err(Error::NonFinite { name: "loss".into() });
    }
    let analytic: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(n, p)| (n.to_string(), p.grad.clone()))
        .collect();
    store.zero_grad();

    let mut max_rel_err = 0.0f64;
    let mut worst_param = String::new();
    let mut n_checked = 0;
    for (name, grads) in &analytic {
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.values(name)[i];
            store.values_mut(name)[i] = orig + h;
            let plus = net.loss(store);
            store.values_mut(name)[i] = orig - h;
            let minus = net.loss(store);
            store.values_mut(name)[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { name: name.clone() });
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_param = format!("{name}[{i}]");
            }
            n_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_param,
        n_checked,
        pass: max_rel_err < tol,
    })
}
