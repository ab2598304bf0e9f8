//! Adaptive-moment optimizer with global-norm gradient clipping and
//! per-group freezing.

use std::collections::HashSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::param::{GradStore, ParamGroup, ParamStore};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_global_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_global_norm: 5.0,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: u64,
    pub frozen: HashSet<ParamGroup>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| Array2::zeros(e.value.dim())).collect();
        let v = store.iter().map(|(_, e)| Array2::zeros(e.value.dim())).collect();
        Adam {
            cfg,
            m,
            v,
            t: 0,
            frozen: HashSet::new(),
        }
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &mut GradStore, lr: f64) {
        let norm = grads.global_norm();
        if norm > self.cfg.clip_global_norm && norm > 0.0 {
            grads.scale(self.cfg.clip_global_norm / norm);
        }
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let frozen = &self.frozen;
        for (pid, entry) in store.iter().map(|(i, e)| (i, e.group)).collect::<Vec<_>>() {
            if frozen.contains(&entry) {
                continue;
            }
            let g = &grads.grads[pid];
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (mh, vh) = (m.clone(), v.clone());
            store.update(pid, |p| {
                ndarray::Zip::from(p).and(&mh).and(&vh).for_each(|p, &m, &v| {
                    *p -= lr * (m / b1t) / ((v / b2t).sqrt() + eps);
                });
            });
        }
    }

    /// Serializable optimizer state for checkpoint resume.
    pub fn export_state(&self) -> AdamState {
        AdamState {
            t: self.t,
            m: self.m.iter().map(flatten).collect(),
            v: self.v.iter().map(flatten).collect(),
        }
    }

    pub fn import_state(&mut self, state: &AdamState) {
        self.t = state.t;
        for (dst, src) in self.m.iter_mut().zip(&state.m) {
            *dst = unflatten(src, dst.dim());
        }
        for (dst, src) in self.v.iter_mut().zip(&state.v) {
            *dst = unflatten(src, dst.dim());
        }
    }
}

fn flatten(a: &Array2<f64>) -> Vec<f64> {
    a.iter().cloned().collect()
}

fn unflatten(v: &[f64], dim: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(dim, v.to_vec()).expect("optimizer state shape mismatch")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Step-decay learning-rate schedule: lr * factor^(epoch / every).
pub fn decayed_lr(initial: f64, decay_factor: f64, decay_every_epochs: u32, epoch: u32) -> f64 {
    if decay_every_epochs == 0 {
        return initial;
    }
    initial * decay_factor.powi((epoch / decay_every_epochs) as i32)
}
