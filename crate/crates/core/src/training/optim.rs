use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. Gradients must be finite; a non-finite
/// gradient aborts before any parameter changes.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: store.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("gradient of `{}`", store.name(id))));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let c1 = 1.0 - beta1.powf(state.step as f64);
    let c2 = 1.0 - beta2.powf(state.step as f64);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((p, mj), vj) in store.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / c1;
            let vhat = vj / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
