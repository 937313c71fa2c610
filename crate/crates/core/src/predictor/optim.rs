//! AdamW with decoupled weight decay, per-group learning rates and a freeze mask.

use serde::{Deserialize, Serialize};

use super::{FreezeMask, Group, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Effective learning rate of each parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates([f64; 6]);

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self([lr; 6])
    }

    /// `base_lr * level_scale`, further scaled by `lower_multiplier` for the
    /// projection and lower backbone groups.
    pub fn layered(base_lr: f64, level_scale: f64, lower_multiplier: f64) -> Self {
        let lr = base_lr * level_scale;
        let mut r = [lr; 6];
        r[Group::Projection.index()] = lr * lower_multiplier;
        r[Group::Lower.index()] = lr * lower_multiplier;
        Self(r)
    }

    pub fn get(&self, g: Group) -> f64 {
        self.0[g.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Params) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, tensor: usize) -> &[f64] {
        &self.m[tensor]
    }

    pub fn second_moment(&self, tensor: usize) -> &[f64] {
        &self.v[tensor]
    }

    /// One bias-corrected AdamW update. Frozen groups (and their moments)
    /// are left untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Params, mask: &FreezeMask, rates: &GroupRates) {
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (ti, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            if !mask.is_trainable(p.group) {
                continue;
            }
            let lr = rates.get(p.group);
            let decay = 1.0 - lr * weight_decay;
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for (((w, &gr), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gr;
                *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w *= decay;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
