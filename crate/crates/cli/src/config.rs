//! Run configuration: defaults, then a `key=value` file, then flag overrides.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use ecgnat::finetune::FinetuneMode;
use ecgnat::pretrain::MaskMode;
use ecgnat::train::OptimConfig;
use ecgnat::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Corruption operator used in pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    ZeroMask,
}

impl Ablation {
    pub fn mask_mode(self) -> MaskMode {
        match self {
            Ablation::None => MaskMode::Gaussian,
            Ablation::ZeroMask => MaskMode::ZeroMask,
        }
    }
}

/// Which command the configuration is for; picks the optimizer defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    /// Worker threads; 0 keeps the runtime default.
    pub threads: usize,
    pub precision: Precision,
    pub mode: FinetuneMode,
    pub ablation: Ablation,
    pub label_fraction: f64,
    pub repeats: usize,
    pub train_frac: f64,
    /// Pretraining checkpoint period in epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Keys given explicitly by a file, flag or the environment.
    #[serde(skip)]
    pub explicit: BTreeSet<String>,
}

pub const KEYS: &[&str] = &[
    "n_leads",
    "input_len",
    "embed_dim",
    "stage_heads",
    "mlp_ratio",
    "window_k",
    "blocks_per_stage",
    "n_classes",
    "noise_std",
    "mask_ratio",
    "mask_span",
    "tau",
    "alpha",
    "epochs",
    "batch_size",
    "lr",
    "lr_min",
    "weight_decay",
    "seed",
    "threads",
    "precision",
    "mode",
    "ablation",
    "label_fraction",
    "repeats",
    "train_frac",
    "checkpoint_every",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            optim: OptimConfig {
                epochs: 10,
                batch_size: 32,
                lr: 1e-3,
                lr_min: 1e-5,
                weight_decay: 4e-4,
            },
            seed: 0,
            threads: 0,
            precision: Precision::F32,
            mode: FinetuneMode::FullFinetune,
            ablation: Ablation::None,
            label_fraction: 1.0,
            repeats: 1,
            train_frac: 0.8,
            checkpoint_every: 5,
            explicit: BTreeSet::new(),
        }
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V, String>
where
    V::Err: Display,
{
    value.parse().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

/// `key=value` lines with `#` comments. Returns the pairs and one message
/// per malformed line.
pub fn parse_kv(text: &str, origin: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => pairs.push((k.trim().to_string(), v.trim().to_string())),
            _ => errors.push(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)),
        }
    }
    (pairs, errors)
}

/// Splits a `key=value` flag argument.
pub fn parse_override(arg: &str) -> Result<(String, String), String> {
    match arg.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("--set expects key=value, got {arg:?}")),
    }
}

/// Reads a config file. A CSV log whose first line is a `#` JSON header is
/// accepted too, so any run can be replayed from its log.
pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(vec![format!("{}: {e}", path.display())]))?;
    if let Some(json) = text.lines().next().and_then(|l| l.strip_prefix("# {")) {
        let header: serde_json::Value = serde_json::from_str(&format!("{{{json}"))
            .map_err(|e| CliError::Validation(vec![format!("{}: log header: {e}", path.display())]))?;
        let cfg: RunConfig = header
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Validation(vec![format!("{}: log header has no config", path.display())]))
            .and_then(|c| {
                serde_json::from_value(c)
                    .map_err(|e| CliError::Validation(vec![format!("{}: log header: {e}", path.display())]))
            })?;
        return Ok(cfg.pairs());
    }
    let (pairs, errors) = parse_kv(&text, &path.display().to_string());
    if errors.is_empty() {
        Ok(pairs)
    } else {
        Err(CliError::Validation(errors))
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let m = &mut self.model;
        let o = &mut self.optim;
        match key {
            "n_leads" => m.n_leads = num(key, value)?,
            "input_len" => m.input_len = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "stage_heads" => {
                m.stage_heads = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "mlp_ratio" => m.mlp_ratio = num(key, value)?,
            "window_k" => m.window_k = num(key, value)?,
            "blocks_per_stage" => m.blocks_per_stage = num(key, value)?,
            "n_classes" => m.n_classes = num(key, value)?,
            "noise_std" => m.noise_std = num(key, value)?,
            "mask_ratio" => m.mask_ratio = num(key, value)?,
            "mask_span" => m.mask_span = num(key, value)?,
            "tau" => m.tau = num(key, value)?,
            "alpha" => m.alpha = num(key, value)?,
            "epochs" => o.epochs = num(key, value)?,
            "batch_size" => o.batch_size = num(key, value)?,
            "lr" => o.lr = num(key, value)?,
            "lr_min" => o.lr_min = num(key, value)?,
            "weight_decay" => o.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "threads" => self.threads = num(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("precision must be f32 or f64, got {value:?}")),
                }
            }
            "mode" => {
                self.mode = match value {
                    "linear_eval" => FinetuneMode::LinearEval,
                    "full_finetune" => FinetuneMode::FullFinetune,
                    _ => return Err(format!("mode must be linear_eval or full_finetune, got {value:?}")),
                }
            }
            "ablation" => {
                self.ablation = match value {
                    "none" => Ablation::None,
                    "zero-mask" => Ablation::ZeroMask,
                    _ => return Err(format!("ablation must be none or zero-mask, got {value:?}")),
                }
            }
            "label_fraction" => self.label_fraction = num(key, value)?,
            "repeats" => self.repeats = num(key, value)?,
            "train_frac" => self.train_frac = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let m = &self.model;
        let o = &self.optim;
        let heads: Vec<String> = m.stage_heads.iter().map(ToString::to_string).collect();
        let values = [
            m.n_leads.to_string(),
            m.input_len.to_string(),
            m.embed_dim.to_string(),
            heads.join(","),
            m.mlp_ratio.to_string(),
            m.window_k.to_string(),
            m.blocks_per_stage.to_string(),
            m.n_classes.to_string(),
            m.noise_std.to_string(),
            m.mask_ratio.to_string(),
            m.mask_span.to_string(),
            m.tau.to_string(),
            m.alpha.to_string(),
            o.epochs.to_string(),
            o.batch_size.to_string(),
            o.lr.to_string(),
            o.lr_min.to_string(),
            o.weight_decay.to_string(),
            self.seed.to_string(),
            self.threads.to_string(),
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .to_string(),
            match self.mode {
                FinetuneMode::LinearEval => "linear_eval",
                FinetuneMode::FullFinetune => "full_finetune",
            }
            .to_string(),
            match self.ablation {
                Ablation::None => "none",
                Ablation::ZeroMask => "zero-mask",
            }
            .to_string(),
            self.label_fraction.to_string(),
            self.repeats.to_string(),
            self.train_frac.to_string(),
            self.checkpoint_every.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// The configuration as a config file that reproduces it.
    pub fn to_kv_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut out = self.model.violations();
        if let Err(ecgnat::Error::Config(msg)) = self.optim.validate() {
            out.extend(msg.split("; ").map(str::to_string));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            out.push(format!("label_fraction must lie in (0, 1], got {}", self.label_fraction));
        }
        if self.repeats == 0 {
            out.push("repeats must be at least 1".into());
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            out.push(format!("train_frac must lie in (0, 1), got {}", self.train_frac));
        }
        out
    }

    /// Defaults, then `base` (a stored run), then each layer of pairs in
    /// order, then `ECGNAT_SEED` when no layer set the seed. Optimizer keys
    /// left unset take the defaults of `phase`. All problems are reported
    /// together.
    pub fn resolve(
        phase: Phase,
        base: Option<RunConfig>,
        layers: &[(String, Vec<(String, String)>)],
        env_seed: Option<&str>,
    ) -> Result<RunConfig, CliError> {
        let from_base = base.is_some();
        let mut cfg = base.unwrap_or_default();
        let mut errors = Vec::new();
        for (origin, pairs) in layers {
            for (k, v) in pairs {
                if let Err(e) = cfg.set(k, v) {
                    errors.push(format!("{origin}: {e}"));
                }
            }
        }
        if !cfg.explicit.contains("seed") {
            if let Some(s) = env_seed {
                match s.trim().parse() {
                    Ok(v) => cfg.seed = v,
                    Err(e) => errors.push(format!("ECGNAT_SEED: cannot parse {s:?}: {e}")),
                }
            }
        }
        if !from_base {
            cfg.apply_phase_defaults(phase);
        }
        errors.extend(cfg.violations());
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Validation(errors))
        }
    }

    /// Pretraining runs 10 epochs at lr 1e-3; fine-tuning 25 epochs at
    /// 1e-4 (full) or 1e-3 (linear evaluation).
    fn apply_phase_defaults(&mut self, phase: Phase) {
        let (epochs, lr) = match phase {
            Phase::Pretrain | Phase::Other => (10, 1e-3),
            Phase::Finetune => match self.mode {
                FinetuneMode::FullFinetune => (25, 1e-4),
                FinetuneMode::LinearEval => (25, 1e-3),
            },
        };
        if !self.explicit.contains("epochs") {
            self.optim.epochs = epochs;
        }
        if !self.explicit.contains("lr") {
            self.optim.lr = lr;
        }
    }

    /// Model keys given explicitly that disagree with `stored`, naming both values.
    pub fn model_mismatches(&self, stored: &ModelConfig, keys: &[&str]) -> Vec<String> {
        let mut probe = RunConfig {
            model: stored.clone(),
            ..RunConfig::default()
        };
        probe.explicit.clear();
        let ours: Vec<(String, String)> = self.pairs();
        let theirs: Vec<(String, String)> = probe.pairs();
        ours.iter()
            .zip(&theirs)
            .filter(|((k, a), (_, b))| keys.contains(&k.as_str()) && self.explicit.contains(k) && a != b)
            .map(|((k, a), (_, b))| format!("checkpoint has {k}={b} but the configuration asks for {k}={a}"))
            .collect()
    }
}

/// Keys that fix the encoder's tensor shapes.
pub const ARCH_KEYS: &[&str] = &[
    "n_leads",
    "input_len",
    "embed_dim",
    "stage_heads",
    "mlp_ratio",
    "window_k",
    "blocks_per_stage",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let (file, errs) = parse_kv("# comment\nembed_dim = 16 # trailing\n\nseed=3\n", "f");
        assert!(errs.is_empty());
        let flags = vec![("seed".to_string(), "9".to_string())];
        let cfg = RunConfig::resolve(Phase::Pretrain, None, &[("f".into(), file), ("flag".into(), flags)], Some("4"))
            .unwrap();
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn env_seed_is_only_a_fallback() {
        let cfg = RunConfig::resolve(Phase::Other, None, &[], Some("17")).unwrap();
        assert_eq!(cfg.seed, 17);
        let cfg = RunConfig::resolve(Phase::Other, None, &[], None).unwrap();
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn phase_defaults_yield_to_explicit_values() {
        let ft = RunConfig::resolve(Phase::Finetune, None, &[], None).unwrap();
        assert_eq!((ft.optim.epochs, ft.optim.lr), (25, 1e-4));
        let lin = vec![("mode".to_string(), "linear_eval".to_string())];
        let ft = RunConfig::resolve(Phase::Finetune, None, &[("f".into(), lin)], None).unwrap();
        assert_eq!(ft.optim.lr, 1e-3);
        let lr = vec![("lr".to_string(), "0.5".to_string())];
        let ft = RunConfig::resolve(Phase::Finetune, None, &[("f".into(), lr)], None).unwrap();
        assert_eq!(ft.optim.lr, 0.5);
    }

    #[test]
    fn every_error_is_listed() {
        let bad = vec![
            ("embed_dim".to_string(), "7".to_string()),
            ("bogus".to_string(), "1".to_string()),
            ("lr".to_string(), "x".to_string()),
            ("label_fraction".to_string(), "0".to_string()),
        ];
        match RunConfig::resolve(Phase::Pretrain, None, &[("f".into(), bad)], None) {
            Err(CliError::Validation(errs)) => {
                assert!(errs.len() >= 4, "{errs:?}");
                assert!(errs.iter().any(|e| e.contains("bogus")));
                assert!(errs.iter().any(|e| e.contains("embed_dim")));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("stage_heads", "1,2").unwrap();
        cfg.set("lr", "0.000123").unwrap();
        cfg.set("ablation", "zero-mask").unwrap();
        let (pairs, errs) = parse_kv(&cfg.to_kv_text(), "t");
        assert!(errs.is_empty());
        let mut back = RunConfig::default();
        for (k, v) in &pairs {
            back.set(k, v).unwrap();
        }
        back.explicit = cfg.explicit.clone();
        assert_eq!(back, cfg);
        assert_eq!(pairs.len(), KEYS.len());
    }
}
