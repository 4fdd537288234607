use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument(format!(
                "invalid adam settings {self:?}"
            )))
        }
    }
}

/// Bias-corrected Adam update for step `step` (1-based), then clears the
/// gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig, step: u64) -> Result<(), TensorError> {
    if step == 0 {
        return Err(TensorError::InvalidStep(step));
    }
    cfg.validate()?;
    let t = step.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for p in store.iter_mut() {
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..value.len() {
            let g = grad[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
            value[i] = (value[i] as f64 - update) as f32;
            grad[i] = 0.0;
        }
    }
    Ok(())
}
