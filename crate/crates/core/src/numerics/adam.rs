use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::{Error, Result};

/// Adam hyperparameters. `lr` is the step size of an *ascent* step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("adam lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::arg(format!("adam {name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::arg("adam eps must be > 0"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step that *increases* the objective whose
/// gradient is `grads`:
///
/// `p <- p + lr * m_hat / (sqrt(v_hat) + eps)`
///
/// Callers minimizing a loss pass the negated loss gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    params.check_layout(grads, "adam_step grads")?;
    params.check_layout(&state.m, "adam_step first moment")?;
    params.check_layout(&state.v, "adam_step second moment")?;

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let p = p.as_mut_slice();
        let g = g.as_slice();
        let m = m.as_mut_slice();
        let v = v.as_mut_slice();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] += cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
