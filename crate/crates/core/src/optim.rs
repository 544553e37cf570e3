//! AdamW with per-group decoupled weight decay, and the warm-up + cosine
//! learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{DecayGroup, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay_backbone: f64,
    pub weight_decay_landmark: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay_backbone: 0.1, weight_decay_landmark: 0.05 }
    }
}

impl AdamWConfig {
    pub fn decay(&self, group: DecayGroup) -> f64 {
        match group {
            DecayGroup::Backbone => self.weight_decay_backbone,
            DecayGroup::LandmarkNet => self.weight_decay_landmark,
            DecayGroup::NoDecay => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay_backbone >= 0.0
            && self.weight_decay_landmark >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: one pair of moment buffers per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { config, first: zeros.clone(), second: zeros, steps: 0 }
    }

    /// One update with learning rate `lr`; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment buffers for {} parameters",
                grads.len(),
                self.first.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            let g = &grads[id.index()];
            if g.shape() != p.value.shape() || self.first[id.index()].shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} for `{}` of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = T::of(1.0 - libm::pow(c.beta1, t as f64));
        let bc2 = T::of(1.0 - libm::pow(c.beta2, t as f64));
        let (b1, b2, eps, lr_t) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps), T::of(lr));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let shrink = T::of(1.0 - lr * c.decay(store.param(id).group));
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] = w[j] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over a set of gradients.
pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|&v| v.as_f64() * v.as_f64()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { base_lr: 3e-4, min_lr: 1e-6, warmup_epochs: 5, total_epochs: 30, steps_per_epoch: 1 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs > 0 && self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.steps_per_epoch == 0 || self.base_lr < 0.0 || self.min_lr < 0.0 || self.min_lr > self.base_lr {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Linear ramp from 0 over the warm-up, then a half cosine that lands on
    /// `min_lr` at the final step.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.base_lr * step as f64 / warm as f64;
        }
        let span = self.total_steps().saturating_sub(1).saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}
