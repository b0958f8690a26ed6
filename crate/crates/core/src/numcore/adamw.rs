use serde::{Deserialize, Serialize};

use super::tensor::{all_finite, ParamTensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamWState {
    pub fn new(params: &[ParamTensor]) -> Self {
        AdamWState {
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
        }
    }

    fn congruent(&self, params: &[ParamTensor]) -> bool {
        self.first_moment.len() == params.len()
            && self.second_moment.len() == params.len()
            && params
                .iter()
                .zip(self.first_moment.iter().zip(&self.second_moment))
                .all(|(p, (m, v))| m.len() == p.numel() && v.len() == p.numel())
    }
}

/// One AdamW update with decoupled weight decay.
///
/// Nothing is modified when a gradient is non-finite.
pub fn adamw_step(params: &mut [ParamTensor], grads: &[ParamTensor], state: &mut AdamWState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || params.iter().zip(grads).any(|(p, g)| p.numel() != g.numel()) {
        return Err(Error::dim("gradients are not congruent to parameters"));
    }
    if !state.congruent(params) {
        return Err(Error::dim("optimizer state is not congruent to parameters"));
    }
    if let Some(g) = grads.iter().find(|g| !all_finite(&g.data)) {
        return Err(Error::numeric(format!("non-finite gradient for `{}`", g.name)));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] = p.data[j] * decay - cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        if !all_finite(&p.data) {
            return Err(Error::numeric(format!("parameter `{}` became non-finite", p.name)));
        }
    }
    Ok(())
}
