use serde::{Deserialize, Serialize};

use super::net::ToyNetParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter in [`ToyNetParams::to_flat`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

/// `v <- mu v - lr (g + lambda w); w <- w + v`, elementwise.
pub fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], cfg: &SgdConfig) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = cfg.momentum * *v - cfg.learning_rate * (g + cfg.weight_decay * *w);
        *w += *v;
    }
}

/// One SGD step. A non-finite gradient aborts without touching `params`.
pub fn sgd_step(params: &mut ToyNetParams, grads: &ToyNetParams, state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    if grads.layers.len() != params.layers.len() || grads.num_params() != params.num_params() {
        return Err(Error::Shape("gradient layout differs from parameters".into()));
    }
    if let Some((layer, i, v)) = grads.find_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {layer} element {i} is {v}")));
    }
    let n = params.num_params();
    if state.velocity.len() != n {
        state.velocity = vec![0.0; n];
    }
    let mut w = params.to_flat();
    sgd_update(&mut w, &grads.to_flat(), &mut state.velocity, cfg);
    params.set_flat(&w);
    Ok(())
}
