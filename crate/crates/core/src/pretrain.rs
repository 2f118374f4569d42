//! Masked-autoencoder pretraining.
//!
//! A random subset of token columns is corrupted right after the tokenizer
//! (additive Gaussian noise, or zeroing for the ablation), the corrupted
//! tokens run through the encoder and decoder, and the loss is the mean
//! squared error over the input spans that the masked tokens cover.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{EcgNat, ModelConfig};
use crate::optim::{AdamW, CosineSchedule};
use crate::params::Binder;
use crate::tensor::{Real, Tensor};
use crate::train::{check_finite, epoch_batches, rng_for, OptimConfig, DOMAIN_EVAL, DOMAIN_MASK};

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Sorted, unique masked token columns.
    pub positions: Vec<usize>,
    pub n_tokens: usize,
    pub noise_std: f64,
}

impl MaskPlan {
    /// Samples `round(ratio·n_tokens)` distinct columns.
    pub fn sample(n_tokens: usize, ratio: f64, noise_std: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio must lie in [0, 1], got {ratio}")));
        }
        let count = (ratio * n_tokens as f64).round() as usize;
        let mut positions = sample(rng, n_tokens, count).into_vec();
        positions.sort_unstable();
        Ok(MaskPlan {
            positions,
            n_tokens,
            noise_std,
        })
    }

    /// Like [`MaskPlan::sample`], but masks contiguous segments of `span`
    /// tokens at random starts until exactly `round(ratio·n_tokens)` columns
    /// are covered. `span == 1` is the same distribution as `sample`.
    pub fn sample_spans(n_tokens: usize, ratio: f64, span: usize, noise_std: f64, rng: &mut impl Rng) -> Result<Self> {
        if span <= 1 {
            return Self::sample(n_tokens, ratio, noise_std, rng);
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(Error::Config(format!("mask ratio must lie in [0, 1], got {ratio}")));
        }
        let count = (ratio * n_tokens as f64).round() as usize;
        let mut masked = vec![false; n_tokens];
        let mut have = 0;
        while have < count {
            let start = rng.random_range(0..n_tokens);
            for m in masked.iter_mut().skip(start).take(span) {
                if have == count {
                    break;
                }
                if !*m {
                    *m = true;
                    have += 1;
                }
            }
        }
        let positions = (0..n_tokens).filter(|&i| masked[i]).collect();
        Ok(MaskPlan {
            positions,
            n_tokens,
            noise_std,
        })
    }

    pub fn from_positions(mut positions: Vec<usize>, n_tokens: usize, noise_std: f64) -> Result<Self> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.last() {
            if p >= n_tokens {
                return Err(Error::Index { index: p, len: n_tokens });
            }
        }
        Ok(MaskPlan {
            positions,
            n_tokens,
            noise_std,
        })
    }

    fn check(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() != 2 || tokens[1] != self.n_tokens {
            return Err(Error::shape(
                "mask",
                format!("plan covers {} tokens, got {tokens:?}", self.n_tokens),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    Gaussian,
    ZeroMask,
}

/// Adds `N(0, noise_std)` to every channel of each masked token column.
pub fn apply_mask<'g, T: Real>(tokens: Var<'g, T>, plan: &MaskPlan, rng: &mut impl Rng) -> Result<Var<'g, T>> {
    let shape = tokens.shape();
    plan.check(&shape)?;
    if plan.positions.is_empty() || plan.noise_std == 0.0 {
        return Ok(tokens);
    }
    let (c, n) = (shape[0], shape[1]);
    let normal = Normal::new(0.0, plan.noise_std).map_err(|e| Error::Config(format!("noise std: {e}")))?;
    let mut noise = vec![T::zero(); c * n];
    for &p in &plan.positions {
        for ch in 0..c {
            noise[ch * n + p] = T::from_f(normal.sample(rng));
        }
    }
    tokens.add(tokens.graph().constant(Tensor::from_vec(&shape, noise)?))
}

/// Replaces each masked token column with zeros.
pub fn zero_mask_variant<'g, T: Real>(tokens: Var<'g, T>, plan: &MaskPlan) -> Result<Var<'g, T>> {
    let shape = tokens.shape();
    plan.check(&shape)?;
    if plan.positions.is_empty() {
        return Ok(tokens);
    }
    let mut keep = vec![T::one(); shape[1]];
    for &p in &plan.positions {
        keep[p] = T::zero();
    }
    tokens.mul(tokens.graph().constant(Tensor::from_vec(&[shape[1]], keep)?))
}

pub fn corrupt<'g, T: Real>(tokens: Var<'g, T>, plan: &MaskPlan, mode: MaskMode, rng: &mut impl Rng) -> Result<Var<'g, T>> {
    match mode {
        MaskMode::Gaussian => apply_mask(tokens, plan, rng),
        MaskMode::ZeroMask => zero_mask_variant(tokens, plan),
    }
}

/// Mean squared error over the input samples covered by masked tokens,
/// each token spanning `stride` consecutive samples of every lead.
/// An empty mask gives a constant zero.
pub fn recon_loss<'g, T: Real>(x: Var<'g, T>, x_hat: Var<'g, T>, plan: &MaskPlan, stride: usize) -> Result<Var<'g, T>> {
    let shape = x.shape();
    if shape != x_hat.shape() || shape.len() != 2 {
        return Err(Error::shape(
            "recon_loss",
            format!("input {shape:?} vs reconstruction {:?}", x_hat.shape()),
        ));
    }
    let (leads, len) = (shape[0], shape[1]);
    let mut col = vec![T::zero(); len];
    let mut covered = 0usize;
    for &p in &plan.positions {
        for slot in col.iter_mut().take(((p + 1) * stride).min(len)).skip(p * stride) {
            *slot = T::one();
            covered += 1;
        }
    }
    let g = x.graph();
    if covered == 0 {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let mask = g.constant(Tensor::from_vec(&[len], col)?);
    let diff = x_hat.sub(x)?.mul(mask)?;
    Ok(diff.mul(diff)?.sum().scale(T::one() / T::from_f((covered * leads) as f64)))
}

/// One masked forward pass; returns the loss node.
pub fn masked_loss<'g, T: Real>(
    model: &EcgNat<T>,
    p: &Binder<'g, '_, T>,
    x: &Tensor<T>,
    mode: MaskMode,
    rng: &mut impl Rng,
) -> Result<Var<'g, T>> {
    let g = p.graph();
    let cfg = &model.config;
    let xv = g.constant(x.clone());
    let tokens = model.tokenize(p, xv)?;
    let plan = MaskPlan::sample_spans(tokens.shape()[1], cfg.mask_ratio, cfg.mask_span, cfg.noise_std, rng)?;
    let corrupted = corrupt(tokens, &plan, mode, rng)?;
    let z = model.encode_tokens(p, corrupted)?;
    let x_hat = model.decode(p, z)?;
    recon_loss(xv, x_hat, &plan, cfg.token_stride())
}

/// Mean masked-region MSE with masks fixed by `seed` and the sample index.
pub fn eval_recon<T: Real>(model: &EcgNat<T>, xs: &[Tensor<T>], mode: MaskMode, seed: u64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let losses = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let g = Graph::new();
            let p = Binder::new(&g, &model.params, false);
            let mut rng = rng_for(seed, DOMAIN_EVAL, i as u64);
            Ok(masked_loss(model, &p, x, mode, &mut rng)?.item().as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    check_finite(losses.iter().sum::<f64>() / xs.len() as f64, "evaluation loss")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub mode: MaskMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub step: u64,
    pub recon_loss: f64,
    pub lr: f64,
}

pub const PRETRAIN_CSV_HEADER: &str = "epoch,step,recon_loss,lr";

impl PretrainEpoch {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, self.recon_loss, self.lr)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PretrainMeta {
    kind: String,
    model: ModelConfig,
    pretrain: PretrainConfig,
    schedule: CosineSchedule,
    epoch: usize,
    step: u64,
    adam_step: u64,
    extra: serde_json::Value,
}

/// Model, optimizer, schedule and counters of a pretraining run.
#[derive(Debug, Clone)]
pub struct Pretrainer<T: Real> {
    pub model: EcgNat<T>,
    pub opt: AdamW<T>,
    pub schedule: CosineSchedule,
    pub cfg: PretrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

/// Optimizer steps per epoch for round-robin batching over `sizes`.
pub fn steps_per_epoch(sizes: &[usize], batch: usize) -> usize {
    sizes.iter().map(|s| s.div_ceil(batch)).sum()
}

impl<T: Real> Pretrainer<T> {
    pub fn new(mut model: EcgNat<T>, cfg: PretrainConfig, dataset_sizes: &[usize]) -> Result<Self> {
        cfg.optim.validate()?;
        model.set_phase_frozen(true);
        let schedule = cfg.optim.schedule(steps_per_epoch(dataset_sizes, cfg.optim.batch_size));
        let opt = AdamW::new(cfg.optim.adamw(), &model.params);
        Ok(Pretrainer {
            model,
            opt,
            schedule,
            cfg,
            epoch: 0,
            step: 0,
        })
    }

    /// One pass over every dataset, batches interleaved round-robin.
    pub fn train_epoch(&mut self, datasets: &[&[Tensor<T>]]) -> Result<PretrainEpoch> {
        if datasets.is_empty() || datasets.iter().any(|d| d.is_empty()) {
            return Err(Error::Config("pretraining needs at least one non-empty dataset".into()));
        }
        let bs = self.cfg.optim.batch_size;
        let seed = self.cfg.seed;
        let per_ds: Vec<Vec<Vec<usize>>> = datasets
            .iter()
            .enumerate()
            .map(|(d, ds)| epoch_batches(ds.len(), bs, seed, ((self.epoch as u64) << 8) | d as u64))
            .collect();
        let rounds = per_ds.iter().map(Vec::len).max().unwrap_or(0);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        let mut lr = self.schedule.lr(self.step);
        for r in 0..rounds {
            for (d, batches) in per_ds.iter().enumerate() {
                let Some(batch) = batches.get(r) else { continue };
                lr = self.schedule.lr(self.step);
                let mut rng = rng_for(seed, DOMAIN_MASK, self.step);
                let inv_b = T::one() / T::from_f(batch.len() as f64);
                let mut batch_loss = 0.0;
                for &i in batch {
                    let g = Graph::new();
                    let p = Binder::new(&g, &self.model.params, true);
                    let loss = masked_loss(&self.model, &p, &datasets[d][i], self.cfg.mode, &mut rng)?;
                    batch_loss += loss.item().as_f64();
                    g.backward(loss.scale(inv_b))?;
                    let bound = p.into_bindings();
                    self.model.params.accumulate(&bound);
                }
                self.opt.step(&mut self.model.params, lr);
                self.step += 1;
                loss_sum += check_finite(batch_loss / batch.len() as f64, "reconstruction loss")?;
                steps += 1;
            }
        }
        self.epoch += 1;
        Ok(PretrainEpoch {
            epoch: self.epoch,
            step: self.step,
            recon_loss: loss_sum / steps as f64,
            lr,
        })
    }

    /// Snapshot with `extra` stored verbatim in the header.
    pub fn checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint<T>> {
        let meta = PretrainMeta {
            kind: "pretrain".into(),
            model: self.model.config.clone(),
            pretrain: self.cfg,
            schedule: self.schedule,
            epoch: self.epoch,
            step: self.step,
            adam_step: self.opt.step,
            extra,
        };
        let mut ck = Checkpoint::new(
            serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        for (name, t) in self.model.params.iter() {
            ck.push(name, t);
        }
        for (name, t) in self.opt.state_tensors(&self.model.params) {
            ck.push(name, &t);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let meta: PretrainMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("not a pretraining checkpoint: {e}")))?;
        let mut model = load_model(ck, meta.model)?;
        model.set_phase_frozen(true);
        let mut opt = AdamW::new(meta.pretrain.optim.adamw(), &model.params);
        opt.load_state(&model.params, meta.adam_step, |n| ck.get(n).cloned())?;
        Ok(Pretrainer {
            model,
            opt,
            schedule: meta.schedule,
            cfg: meta.pretrain,
            epoch: meta.epoch,
            step: meta.step,
        })
    }

    pub fn extra(ck: &Checkpoint<T>) -> serde_json::Value {
        ck.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null)
    }
}

/// Builds a model of `config` and fills it from the checkpoint's tensors.
pub fn load_model<T: Real>(ck: &Checkpoint<T>, config: ModelConfig) -> Result<EcgNat<T>> {
    let mut rng = rng_for(0, 0, 0);
    let mut model = EcgNat::new(config, &mut rng)?;
    model.params.load_values(|n| ck.get(n).cloned())?;
    Ok(model)
}
