//! Supervised fine-tuning with a weighted sum of a supervised contrastive
//! loss on pooled embeddings and cross-entropy on classifier logits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model::{EcgNat, ModelConfig};
use crate::optim::{AdamW, CosineSchedule};
use crate::params::Binder;
use crate::pretrain::load_model;
use crate::tensor::{Real, Tensor};
use crate::train::{check_finite, epoch_batches, OptimConfig};

pub const NORM_FLOOR: f64 = 1e-12;

/// Cosine similarity; 0 when either vector has norm below [`NORM_FLOOR`].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupconInfo {
    /// Anchors with at least one positive.
    pub anchors: usize,
    /// Set when no anchor had a positive and the loss is a constant zero.
    pub degenerate: bool,
}

/// Supervised contrastive loss on `emb [B×C]` with cosine similarity over
/// temperature `tau`. For anchor `i` the candidates are every other sample
/// and the positives are those sharing its label; the per-anchor term is the
/// mean negative log-probability of its positives. Anchors without positives
/// are left out and the rest are averaged.
pub fn supcon_loss<'g, T: Real>(emb: Var<'g, T>, labels: &[usize], tau: f64) -> Result<(Var<'g, T>, SupconInfo)> {
    let shape = emb.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "supcon_loss",
            format!("embeddings {shape:?} for {} labels", labels.len()),
        ));
    }
    let b = labels.len();
    if b < 2 {
        return Err(Error::Contract(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let g = emb.graph();
    let mut weights = vec![T::zero(); b * (b - 1)];
    let mut anchors = 0;
    for i in 0..b {
        let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let pos = others.iter().filter(|&&j| labels[j] == labels[i]).count();
        if pos == 0 {
            continue;
        }
        anchors += 1;
        let w = T::one() / T::from_f(pos as f64);
        for (slot, &j) in others.iter().enumerate() {
            if labels[j] == labels[i] {
                weights[i * (b - 1) + slot] = w;
            }
        }
    }
    if anchors == 0 {
        log::warn!("contrastive loss: no anchor in the batch has a positive");
        return Ok((
            g.constant(Tensor::scalar(T::zero())),
            SupconInfo {
                anchors,
                degenerate: true,
            },
        ));
    }
    let zn = emb.l2_normalize();
    let sim = zn.matmul(zn.t()?)?.scale(T::from_f(1.0 / tau));
    let off_diag: Vec<usize> = (0..b)
        .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| i * b + j))
        .collect();
    let logits = sim.reshape(&[b * b])?.index_select(0, &off_diag)?.reshape(&[b, b - 1])?;
    let logp = logits.log_softmax();
    let w = g.constant(Tensor::from_vec(&[b, b - 1], weights)?);
    let loss = logp.mul(w)?.sum().scale(-T::one() / T::from_f(anchors as f64));
    Ok((
        loss,
        SupconInfo {
            anchors,
            degenerate: false,
        },
    ))
}

/// Mean negative log-likelihood of `labels` under softmax of `logits [B×K]`.
pub fn ce_loss<'g, T: Real>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "ce_loss",
            format!("logits {shape:?} for {} labels", labels.len()),
        ));
    }
    let k = shape[1];
    let mut onehot = vec![T::zero(); labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Contract(format!("label {y} outside 0..{k}")));
        }
        onehot[i * k + y] = T::one();
    }
    let w = logits.graph().constant(Tensor::from_vec(&shape, onehot)?);
    Ok(logits
        .log_softmax()
        .mul(w)?
        .sum()
        .scale(-T::one() / T::from_f(labels.len() as f64)))
}

/// `alpha·supcon + (1−alpha)·ce`, returning a component unchanged at either endpoint.
pub fn total_loss<'g, T: Real>(supcon: Var<'g, T>, ce: Var<'g, T>, alpha: f64) -> Result<Var<'g, T>> {
    if alpha == 0.0 {
        return Ok(ce);
    }
    if alpha == 1.0 {
        return Ok(supcon);
    }
    supcon.scale(T::from_f(alpha)).add(ce.scale(T::from_f(1.0 - alpha)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    LinearEval,
    FullFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub alpha: f64,
    pub tau: f64,
    pub optim: OptimConfig,
    pub seed: u64,
}

/// Training inputs: raw signals, or cached encoder outputs (linear eval only).
#[derive(Debug, Clone, Copy)]
pub enum Inputs<'a, T: Real> {
    Signals(&'a [Tensor<T>]),
    Latents(&'a [Tensor<T>]),
}

impl<T: Real> Inputs<'_, T> {
    fn len(&self) -> usize {
        match self {
            Inputs::Signals(x) | Inputs::Latents(x) => x.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub total_loss: f64,
    pub supcon: f64,
    pub ce: f64,
    pub train_acc: f64,
}

pub const FINETUNE_CSV_HEADER: &str = "epoch,total_loss,supcon,ce,train_acc,test_acc";

impl FinetuneEpoch {
    pub fn csv_row(&self, test_acc: f64) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.total_loss, self.supcon, self.ce, self.train_acc, test_acc
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FinetuneMeta {
    kind: String,
    model: ModelConfig,
    finetune: FinetuneConfig,
    schedule: CosineSchedule,
    epoch: usize,
    step: u64,
    adam_step: u64,
    extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Finetuner<T: Real> {
    pub model: EcgNat<T>,
    pub opt: AdamW<T>,
    pub schedule: CosineSchedule,
    pub cfg: FinetuneConfig,
    pub epoch: usize,
    pub step: u64,
}

impl<T: Real> Finetuner<T> {
    pub fn new(mut model: EcgNat<T>, cfg: FinetuneConfig, train_size: usize) -> Result<Self> {
        cfg.optim.validate()?;
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", cfg.alpha)));
        }
        if !(cfg.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", cfg.tau)));
        }
        model.set_phase_frozen(false);
        model.set_encoder_frozen(cfg.mode == FinetuneMode::LinearEval);
        let schedule = cfg.optim.schedule(train_size.div_ceil(cfg.optim.batch_size));
        let opt = AdamW::new(cfg.optim.adamw(), &model.params);
        Ok(Finetuner {
            model,
            opt,
            schedule,
            cfg,
            epoch: 0,
            step: 0,
        })
    }

    fn latent<'g>(&self, p: &Binder<'g, '_, T>, inputs: Inputs<'_, T>, i: usize) -> Result<Var<'g, T>> {
        match inputs {
            Inputs::Signals(xs) => self.model.encode(p, p.graph().constant(xs[i].clone())),
            Inputs::Latents(zs) => Ok(p.graph().constant(zs[i].clone())),
        }
    }

    pub fn train_epoch(&mut self, inputs: Inputs<'_, T>, labels: &[usize]) -> Result<FinetuneEpoch> {
        let n = inputs.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Config(format!("{n} training inputs for {} labels", labels.len())));
        }
        if matches!(inputs, Inputs::Latents(_)) && self.cfg.mode != FinetuneMode::LinearEval {
            return Err(Error::Contract("cached encoder outputs are only valid for linear evaluation".into()));
        }
        let batches = epoch_batches(n, self.cfg.optim.batch_size, self.cfg.seed, self.epoch as u64);
        let (mut tot, mut sc, mut ce_sum, mut hits) = (0.0, 0.0, 0.0, 0usize);
        for batch in &batches {
            let lr = self.schedule.lr(self.step);
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let p = Binder::new(&g, &self.model.params, true);
            let zs = batch
                .iter()
                .map(|&i| self.latent(&p, inputs, i))
                .collect::<Result<Vec<_>>>()?;
            let logits = self.model.classify_batch(&p, &zs)?;
            let ce = ce_loss(logits, &ys)?;
            let supcon = if self.cfg.alpha > 0.0 && ys.len() >= 2 {
                let embs = zs
                    .iter()
                    .map(|&z| self.model.embed(z)?.reshape(&[1, z.shape()[0]]))
                    .collect::<Result<Vec<_>>>()?;
                Some(supcon_loss(concat(&embs, 0)?, &ys, self.cfg.tau)?.0)
            } else {
                None
            };
            let loss = match supcon {
                Some(s) => total_loss(s, ce, self.cfg.alpha)?,
                None => ce,
            };
            {
                let lv = logits.value_ref();
                let k = lv.shape()[1];
                for (row, &y) in lv.data().chunks(k).zip(&ys) {
                    let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                    hits += usize::from(argmax(&r) == y);
                }
            }
            tot += check_finite(loss.item().as_f64(), "fine-tuning loss")? * ys.len() as f64;
            sc += supcon.map_or(0.0, |s| s.item().as_f64()) * ys.len() as f64;
            ce_sum += ce.item().as_f64() * ys.len() as f64;
            g.backward(loss)?;
            let bound = p.into_bindings();
            self.model.params.accumulate(&bound);
            self.opt.step(&mut self.model.params, lr);
            self.step += 1;
        }
        self.epoch += 1;
        let nf = n as f64;
        Ok(FinetuneEpoch {
            epoch: self.epoch,
            total_loss: tot / nf,
            supcon: sc / nf,
            ce: ce_sum / nf,
            train_acc: hits as f64 / nf,
        })
    }

    /// Encoder outputs for caching in linear evaluation.
    pub fn latents(&self, xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        crate::train::latents(&self.model, xs)
    }

    /// Class probabilities per input.
    pub fn predict(&self, inputs: Inputs<'_, T>) -> Result<Vec<Vec<f64>>> {
        predict(&self.model, inputs)
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint<T>> {
        let meta = FinetuneMeta {
            kind: "finetune".into(),
            model: self.model.config.clone(),
            finetune: self.cfg,
            schedule: self.schedule,
            epoch: self.epoch,
            step: self.step,
            adam_step: self.opt.step,
            extra,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?);
        for (name, t) in self.model.params.iter() {
            ck.push(name, t);
        }
        for (name, t) in self.opt.state_tensors(&self.model.params) {
            ck.push(name, &t);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let meta: FinetuneMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("not a fine-tuning checkpoint: {e}")))?;
        let mut model = load_model(ck, meta.model)?;
        model.set_phase_frozen(false);
        model.set_encoder_frozen(meta.finetune.mode == FinetuneMode::LinearEval);
        let mut opt = AdamW::new(meta.finetune.optim.adamw(), &model.params);
        opt.load_state(&model.params, meta.adam_step, |n| ck.get(n).cloned())?;
        Ok(Finetuner {
            model,
            opt,
            schedule: meta.schedule,
            cfg: meta.finetune,
            epoch: meta.epoch,
            step: meta.step,
        })
    }
}

/// Model configuration stored in any checkpoint header.
pub fn checkpoint_model_config<T: Real>(ck: &Checkpoint<T>) -> Result<ModelConfig> {
    let cfg = ck
        .meta
        .get("model")
        .ok_or_else(|| Error::Checkpoint("header has no model configuration".into()))?;
    serde_json::from_value(cfg.clone()).map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class probabilities per input, computed in parallel without gradients.
pub fn predict<T: Real>(model: &EcgNat<T>, inputs: Inputs<'_, T>) -> Result<Vec<Vec<f64>>> {
    let (xs, raw) = match inputs {
        Inputs::Signals(xs) => (xs, true),
        Inputs::Latents(zs) => (zs, false),
    };
    xs.par_iter()
        .map(|x| {
            let g = Graph::new();
            let p = Binder::new(&g, &model.params, false);
            let xv = g.constant(x.clone());
            let z = if raw { model.encode(&p, xv)? } else { xv };
            let logits = model.classify(&p, z)?.value();
            Ok(softmax_row(&logits.to_f64_vec()))
        })
        .collect()
}

/// Pooled embeddings per input.
pub fn embeddings<T: Real>(model: &EcgNat<T>, xs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>> {
    xs.par_iter()
        .map(|x| {
            let g = Graph::new();
            let p = Binder::new(&g, &model.params, false);
            let z = model.encode(&p, g.constant(x.clone()))?;
            Ok(model.embed(z)?.value().to_f64_vec())
        })
        .collect()
}

pub fn accuracy_of(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs.iter().zip(labels).filter(|(p, &y)| argmax(p) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn ce_two_logits() {
        let g = Graph::<f64>::new();
        let l = g.constant(Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap());
        let want = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((ce_loss(l, &[0]).unwrap().item() - want).abs() < 1e-15);
        assert!((want - 0.1269).abs() < 1e-4);
    }
}
