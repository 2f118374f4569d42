//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-4,
        }
    }
}

/// Cosine annealing from `lr_max` to `lr_min` over `total_steps`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.lr_min;
        }
        let t = step as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First and second moment buffers, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        AdamW {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update at learning rate `lr` to every unfrozen parameter
    /// that holds a gradient, then clears all gradients. Weight decay skips
    /// one-dimensional tensors (biases, norm scales, shifts).
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f(c.beta1), T::from_f(c.beta2));
        let (one_b1, one_b2) = (T::from_f(1.0 - c.beta1), T::from_f(1.0 - c.beta2));
        let step_size = T::from_f(lr / bc1);
        let inv_sqrt_bc2 = T::from_f(1.0 / bc2.sqrt());
        let eps = T::from_f(c.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.is_frozen(id) {
                continue;
            }
            let i = id.0;
            let t = params.get_mut(id);
            let decay = if t.ndim() > 1 {
                T::from_f(1.0 - lr * c.weight_decay)
            } else {
                T::one()
            };
            let (data, grad) = t.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let denom = v[j].sqrt() * inv_sqrt_bc2 + eps;
                data[j] = data[j] * decay - step_size * m[j] / denom;
            }
        }
        params.zero_grads();
    }

    /// Moment buffers as named tensors, for checkpoints.
    pub fn state_tensors(&self, params: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * params.len());
        for (i, (name, t)) in params.iter().enumerate() {
            out.push((format!("adamw.m.{name}"), Tensor::from_vec(t.shape(), self.m[i].clone()).unwrap()));
            out.push((format!("adamw.v.{name}"), Tensor::from_vec(t.shape(), self.v[i].clone()).unwrap()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        params: &ParamStore<T>,
        step: u64,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for (i, (name, t)) in params.iter().enumerate() {
            for (kind, buf) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("adamw.{kind}.{name}");
                let src = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("tensor {key}: shape {:?} vs {:?}", src.shape(), t.shape())));
                }
                buf.copy_from_slice(src.data());
            }
        }
        self.step = step;
        Ok(())
    }
}
