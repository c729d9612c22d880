use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Parameter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup from 0 to `peak_lr` over the first `warmup_fraction` of
/// training, then linear decay to 0 at `total_steps`.
pub fn lr_at_step(total_steps: usize, warmup_fraction: f64, peak_lr: f64, step: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let total = total_steps as f64;
    let warm = warmup_fraction * total;
    let s = step as f64;
    Ok(if s < warm {
        peak_lr * s / warm
    } else if total > warm {
        peak_lr * (total - s) / (total - warm)
    } else {
        0.0
    })
}

/// One decoupled-weight-decay Adam step with bias correction.
pub fn adamw_update(param: &mut Parameter, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let grad = param
        .grad
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", param.name)))?;
    param.step_count += 1;
    let t = param.step_count as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    let p = param.tensor.data_mut();
    let m = param.moment1.data_mut();
    let v = param.moment2.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] = p[i] * decay - lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Updates every parameter of `store` and clears the gradients.
pub fn adamw_store(store: &mut ParamStore, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for p in store.iter_mut() {
        adamw_update(p, lr, cfg)?;
    }
    store.zero_grads();
    Ok(())
}
