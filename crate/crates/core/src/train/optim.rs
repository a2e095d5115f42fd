//! Adam with decoupled weight decay, the warmup/decay learning-rate
//! schedule and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// The full-scale recipe: 4000 warmup steps.
    pub fn full_scale() -> Self {
        AdamConfig {
            warmup_steps: 4000,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 1e-4,
            warmup_steps: 200,
            weight_decay: 0.01,
            clip_norm: 5.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then linear decay to
/// 0 at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * (step as f64 / warmup as f64);
    }
    if step >= total {
        return if total <= warmup && step == warmup { peak } else { 0.0 };
    }
    peak * ((total - step) as f64 / (total - warmup) as f64)
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &ParamGrads) -> f64 {
    grads.grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / norm` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> Result<f64> {
    if grads.grads.iter().any(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in &mut grads.grads {
            *g = g.scale(scale);
        }
    }
    Ok(norm)
}

/// First and second moments per parameter, created lazily.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }

    pub fn moments(&self, index: usize) -> Option<&(Tensor, Tensor)> {
        self.moments.get(index).and_then(Option::as_ref)
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Weight decay is
/// decoupled from the gradient and applies only to parameters marked
/// decayable.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, state: &mut OptimizerState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    for (id, g) in &grads.grads {
        let param = &mut store.params_mut()[id.index()];
        if param.value.shape() != g.shape() {
            return Err(Error::shape("adam_step", param.value.shape(), g.shape()));
        }
        let (m, v) = state.moments[id.index()]
            .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
        let decay = if param.decay { cfg.weight_decay } else { 0.0 };
        let p = param.value.data_mut();
        let moments = m.data_mut().iter_mut().zip(v.data_mut());
        for ((pi, &gi), (mi, vi)) in p.iter_mut().zip(g.data()).zip(moments) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pi -= lr * (decay * *pi + m_hat / (v_hat.sqrt() + cfg.eps));
        }
    }
    Ok(())
}
