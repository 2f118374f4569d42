//! Pieces shared by the pretraining and fine-tuning loops.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::EcgNat;
use crate::optim::{AdamWConfig, CosineSchedule};
use crate::params::Binder;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if !(self.lr > 0.0) {
            bad.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            bad.push(format!("lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr,
            lr_min: self.lr_min,
            total_steps: (self.epochs * steps_per_epoch) as u64,
        }
    }
}

/// Independent generator for `(seed, domain, counter)`.
pub fn rng_for(seed: u64, domain: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(counter);
    rng
}

pub(crate) const DOMAIN_SHUFFLE: u64 = 1;
pub(crate) const DOMAIN_MASK: u64 = 2;
pub(crate) const DOMAIN_EVAL: u64 = 3;

/// Batches of a seeded permutation of `0..n`.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, DOMAIN_SHUFFLE, stream));
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Encoder outputs for every input, computed without recording gradients.
pub fn latents<T: Real>(model: &EcgNat<T>, xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    xs.par_iter()
        .map(|x| {
            let g = Graph::new();
            let p = Binder::new(&g, &model.params, false);
            Ok(model.encode(&p, g.constant(x.clone()))?.value())
        })
        .collect()
}

pub fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Contract(format!("{what} became non-finite ({value})")))
    }
}
