use std::collections::BTreeMap;

use crate::{GradError, Gradients, ParamStore, Tensor};

/// Adaptive-moment optimizer settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
///
/// Every parameter needs a gradient of the same shape; extra gradients are
/// ignored, which lets callers update a subset of a larger graph.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    cfg: &AdamConfig,
    state: &mut AdamState,
) -> Result<(), GradError> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| GradError::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() {
            return Err(GradError::BindingShape {
                name: name.to_string(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = grads.get(&name).expect("checked above");
        let p = params.get_mut(&name).expect("name from store");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name)
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
