use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::nn::ParamStore;

/// Decoupled-weight-decay Adam. Parameters that receive no gradient in a
/// step are left untouched, including their decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: BTreeMap<String, AdamSlot>,
}

#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub step: u64,
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, state: BTreeMap::new() }
    }

    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<usize> {
        let mut updated = 0;
        for (name, var) in ps.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let p = var.as_tensor();
            if !self.state.contains_key(name) {
                self.state.insert(
                    name.clone(),
                    AdamSlot { step: 0, m: p.zeros_like()?, v: p.zeros_like()? },
                );
            }
            let slot = self.state.get_mut(name).unwrap();
            slot.step += 1;
            slot.m = ((&slot.m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            slot.v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
            let denom = ((&slot.v * (1.0 / bc2))?.sqrt()? + self.eps)?;
            let update = (&slot.m * (1.0 / bc1))?.div(&denom)?;
            let next = ((p * (1.0 - lr * self.weight_decay))? - (update * lr)?)?;
            var.set(&next.detach())?;
            updated += 1;
        }
        Ok(updated)
    }
}

/// Cosine annealing from `lr0` at step 0 to `lr_min` at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub lr_min: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.lr0;
        }
        let t = step.min(self.total) as f64 / self.total as f64;
        self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
