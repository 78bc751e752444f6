//! SGD with momentum, L2 weight decay, warm-up and step decay.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in steps.
    pub warmup_steps: usize,
    /// Fractions of the total step count at which the rate drops tenfold.
    pub decay_at: Vec<f64>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 50,
            decay_at: vec![0.75],
            clip_norm: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return Err(Error::config(format!("invalid optimizer settings {self:?}")));
        }
        if self.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("decay points must be fractions in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate at `step` of a run lasting `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let mut lr = self.lr;
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        for &f in &self.decay_at {
            if step as f64 >= f * total as f64 {
                lr *= 0.1;
            }
        }
        lr
    }
}

/// Momentum buffers, one per store entry (empty for buffers and for entries
/// that have not received a gradient yet).
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        SgdState {
            velocity: vec![None; store.len()],
        }
    }
}

/// Global L2 norm of every gradient.
pub fn grad_norm<T: Real>(grads: &Gradients<T>) -> f64 {
    grads.params().map(|(_, g)| g.sq_norm().as_f64()).sum::<f64>().sqrt()
}

/// One SGD update. Weight decay applies to tensors of rank ≥ 2 only.
pub fn sgd_step<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut SgdState<T>,
    grads: &Gradients<T>,
    cfg: &SgdConfig,
    lr: f64,
) {
    let norm = grad_norm(grads);
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    let (clip, lr, mu, wd) = (T::lit(clip), T::lit(lr), T::lit(cfg.momentum), T::lit(cfg.weight_decay));
    let mut updates: Vec<(ParamId, &Tensor<T>)> = grads.params().collect();
    updates.sort_by_key(|(id, _)| *id);
    for (id, g) in updates {
        if !store.entry(id).trainable {
            continue;
        }
        let decay = store.get(id).shape().len() >= 2;
        let p = store.get_mut(id);
        let v = state.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let mut d = gv * clip;
            if decay {
                d += wd * *pv;
            }
            *vv = mu * *vv + d;
            *pv -= lr * *vv;
        }
    }
}
