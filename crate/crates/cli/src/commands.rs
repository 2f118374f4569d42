//! `synth`, `pretrain`, `finetune`, `eval` and `bench`.

use std::path::{Path, PathBuf};

use ecgnat::checkpoint::{stored_dtype, Checkpoint};
use ecgnat::data::{self, Manifest, ManifestRow, Split, SYNTH_CLASSES};
use ecgnat::finetune::{
    accuracy_of, checkpoint_model_config, embeddings, predict, FinetuneConfig, FinetuneMode, Finetuner, Inputs,
    FINETUNE_CSV_HEADER,
};
use ecgnat::metrics::{summary_csv, EvalResult};
use ecgnat::natten::{self, BenchRow};
use ecgnat::pretrain::{eval_recon, load_model, PretrainConfig, Pretrainer, PRETRAIN_CSV_HEADER};
use ecgnat::train::rng_for;
use ecgnat::{count_params, DType, EcgNat, ParamCount, Real, Tensor};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{Phase, Precision, RunConfig, ARCH_KEYS};
use crate::runlog::CsvLog;
use crate::{BenchArgs, CliError, CliResult, EvalArgs, FinetuneArgs, GlobalArgs, PretrainArgs, SplitArg, SynthArgs};

/// RNG domain for parameter initialisation.
const INIT_DOMAIN: u64 = 0x1417;

pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const RECON_EVAL_LOG: &str = "recon_eval.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const FINAL_CKPT: &str = "final.ckpt";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn pair(k: &str, v: impl ToString) -> (String, String) {
    (k.to_string(), v.to_string())
}

pub fn epoch_ckpt_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.ckpt")
}

pub fn checkpoint_dtype(path: &Path) -> CliResult<DType> {
    stored_dtype(path)?.ok_or_else(|| CliError::Runtime(format!("{} holds no tensors", path.display())))
}

fn load_checkpoint<T: Real>(path: &Path) -> CliResult<Checkpoint<T>> {
    let stored = checkpoint_dtype(path)?;
    if stored != T::DTYPE {
        return Err(CliError::Validation(vec![format!(
            "{} stores {stored:?} tensors but the run uses precision {:?}",
            path.display(),
            T::DTYPE
        )]));
    }
    Ok(Checkpoint::load(path)?)
}

/// Preprocessed model inputs and labels for `rows` of a manifest.
fn load_inputs<T: Real>(
    man: &Manifest,
    rows: &[usize],
    cfg: &ecgnat::ModelConfig,
) -> CliResult<(Vec<Tensor<T>>, Vec<Option<usize>>)> {
    let loaded = rows
        .par_iter()
        .map(|&i| {
            let row = &man.rows[i];
            let path = man.resolve(row);
            let (x, label) = data::load_model_input(&path, cfg.input_len)?;
            if x.shape()[0] != cfg.n_leads {
                return Err(ecgnat::Error::Config(format!(
                    "{}: {} leads, the model expects n_leads={}",
                    path.display(),
                    x.shape()[0],
                    cfg.n_leads
                )));
            }
            Ok((x.cast::<T>(), row.label.or(label)))
        })
        .collect::<ecgnat::Result<Vec<_>>>()?;
    Ok(loaded.into_iter().unzip())
}

fn read_manifest(path: &Path) -> CliResult<Manifest> {
    Manifest::read(path).map_err(|e| CliError::Validation(vec![e.to_string()]))
}

/// Labels of every row, or an error listing the unlabeled rows.
fn require_labels(man: &Manifest, path: &Path, rows: &[usize], n_classes: usize) -> CliResult<Vec<usize>> {
    let missing: Vec<&ManifestRow> = rows.iter().map(|&i| &man.rows[i]).filter(|r| r.label.is_none()).collect();
    if let Some(first) = missing.first() {
        return Err(CliError::Validation(vec![format!(
            "{}: {} row(s) have no label (first: {})",
            path.display(),
            missing.len(),
            first.path.display()
        )]));
    }
    let labels: Vec<usize> = rows.iter().map(|&i| man.rows[i].label.unwrap_or(0)).collect();
    if let Some(&max) = labels.iter().max() {
        if max >= n_classes {
            return Err(CliError::Validation(vec![format!(
                "{}: label {max} needs more classes than n_classes={n_classes}",
                path.display()
            )]));
        }
    }
    Ok(labels)
}

pub fn cmd_synth(g: &GlobalArgs, a: &SynthArgs) -> CliResult<()> {
    let cfg = g.resolve(Phase::Other, None, Vec::new())?;
    if a.n_per_class == 0 {
        return Err(CliError::Validation(vec!["n_per_class must be positive".into()]));
    }
    let rec_dir = a.out.join("records");
    create_dir(&rec_dir)?;
    let total = a.n_per_class * SYNTH_CLASSES.len();
    let (train, _) = data::split(total, cfg.train_frac, cfg.seed, 1)?.remove(0);
    let mut is_train = vec![false; total];
    train.iter().for_each(|&i| is_train[i] = true);
    let mut rows = Vec::with_capacity(total);
    for (i, rec) in data::synth_stream(a.n_per_class, cfg.seed).enumerate() {
        data::write_record(&rec_dir, &rec)?;
        rows.push(ManifestRow {
            path: PathBuf::from("records").join(format!("{}.json", rec.record_id)),
            label: rec.label,
            split: if is_train[i] { Split::Train } else { Split::Test },
        });
    }
    Manifest {
        root: a.out.clone(),
        rows,
    }
    .write(&a.out.join("manifest.csv"))?;
    let classes = json!({
        "classes": SYNTH_CLASSES,
        "fs": data::SYNTH_FS,
        "seconds": data::SYNTH_SECONDS,
        "leads": data::SYNTH_LEADS,
        "n_per_class": a.n_per_class,
        "seed": cfg.seed,
        "train_frac": cfg.train_frac,
    });
    write_file(&a.out.join("classes.json"), &format!("{}\n", pretty(&classes)))?;
    log::info!("wrote {total} records to {}", a.out.display());
    Ok(())
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON values always serialise")
}

fn pretrain_flags(a: &PretrainArgs) -> Vec<(String, String)> {
    let mut flags = Vec::new();
    if let Some(ab) = &a.ablation {
        flags.push(pair("ablation", ab));
    }
    if let Some(e) = a.epochs {
        flags.push(pair("epochs", e));
    }
    flags
}

pub fn cmd_pretrain(g: &GlobalArgs, a: &PretrainArgs) -> CliResult<()> {
    let flags = pretrain_flags(a);
    match &a.resume {
        None => {
            let cfg = g.resolve(Phase::Pretrain, None, flags)?;
            match cfg.precision {
                Precision::F32 => pretrain_run::<f32>(cfg, a, None),
                Precision::F64 => pretrain_run::<f64>(cfg, a, None),
            }
        }
        Some(path) => match checkpoint_dtype(path)? {
            DType::F32 => {
                let ck = load_checkpoint::<f32>(path)?;
                pretrain_run(resume_config(g, &ck, flags)?, a, Some(ck))
            }
            DType::F64 => {
                let ck = load_checkpoint::<f64>(path)?;
                pretrain_run(resume_config(g, &ck, flags)?, a, Some(ck))
            }
        },
    }
}

/// The stored run configuration with any overrides applied; overrides that
/// would change the run (anything but `threads`) are rejected.
fn resume_config<T: Real>(g: &GlobalArgs, ck: &Checkpoint<T>, flags: Vec<(String, String)>) -> CliResult<RunConfig> {
    let stored: RunConfig = ck
        .meta
        .get("extra")
        .and_then(|e| e.get("config"))
        .cloned()
        .and_then(|c| serde_json::from_value(c).ok())
        .ok_or_else(|| CliError::Runtime("checkpoint carries no run configuration".into()))?;
    let cfg = g.resolve(Phase::Pretrain, Some(stored.clone()), flags)?;
    let diffs: Vec<String> = stored
        .pairs()
        .into_iter()
        .zip(cfg.pairs())
        .filter(|((k, a), (_, b))| k != "threads" && a != b)
        .map(|((k, a), (_, b))| format!("resume: checkpoint has {k}={a}, override asks for {k}={b}"))
        .collect();
    if diffs.is_empty() {
        Ok(cfg)
    } else {
        Err(CliError::Validation(diffs))
    }
}

fn pretrain_run<T: Real>(cfg: RunConfig, a: &PretrainArgs, resume: Option<Checkpoint<T>>) -> CliResult<()> {
    create_dir(&a.out)?;
    let mut train_sets = Vec::new();
    let mut held_out = Vec::new();
    for path in &a.manifests {
        let man = read_manifest(path)?;
        let train = man.indices(Split::Train);
        if train.is_empty() {
            return Err(CliError::Validation(vec![format!("{}: no train rows", path.display())]));
        }
        train_sets.push(load_inputs::<T>(&man, &train, &cfg.model)?.0);
        held_out.extend(load_inputs::<T>(&man, &man.indices(Split::Test), &cfg.model)?.0);
    }
    let sizes: Vec<usize> = train_sets.iter().map(Vec::len).collect();
    let (eval_set, eval_split) = if held_out.is_empty() {
        (&train_sets[0], "train")
    } else {
        (&held_out, "test")
    };
    let header = json!({
        "command": "pretrain",
        "config": cfg,
        "manifests": a.manifests,
        "resume": a.resume,
        "train_sizes": sizes,
        "eval_split": eval_split,
    });

    let resumed = resume.is_some();
    let mut pt = match resume {
        Some(ck) => Pretrainer::from_checkpoint(&ck)?,
        None => {
            let model = EcgNat::<T>::new(cfg.model.clone(), &mut rng_for(cfg.seed, INIT_DOMAIN, 0))?;
            let pc = PretrainConfig {
                optim: cfg.optim,
                mode: cfg.ablation.mask_mode(),
                seed: cfg.seed,
            };
            Pretrainer::new(model, pc, &sizes)?
        }
    };
    let mode = pt.cfg.mode;
    let eval = |pt: &Pretrainer<T>| eval_recon(&pt.model, eval_set, mode, cfg.seed);

    let log_path = a.out.join(PRETRAIN_LOG);
    let eval_path = a.out.join(RECON_EVAL_LOG);
    let (mut log, mut evlog) = if resumed && log_path.exists() {
        let mut log = CsvLog::append(&log_path)?;
        let mut evlog = CsvLog::append(&eval_path)?;
        log.row(&format!("# resumed {header}"))?;
        evlog.row(&format!("# resumed {header}"))?;
        (log, evlog)
    } else {
        let log = CsvLog::create(&log_path, &header, PRETRAIN_CSV_HEADER)?;
        let evlog = CsvLog::create(&eval_path, &header, "epoch,eval_recon")?;
        (log, evlog)
    };
    if !resumed {
        // Epoch 0: the untrained model under the fixed evaluation masks.
        let e0 = eval(&pt)?;
        log.row(&format!("0,0,{e0},{}", pt.schedule.lr(0)))?;
        evlog.row(&format!("0,{e0}"))?;
        log::info!("epoch 0: eval recon {e0:.6}");
    }

    let refs: Vec<&[Tensor<T>]> = train_sets.iter().map(Vec::as_slice).collect();
    let extra = json!({ "config": cfg });
    while pt.epoch < cfg.optim.epochs {
        let e = pt.train_epoch(&refs)?;
        log.row(&e.csv_row())?;
        log::info!("epoch {}: recon {:.6} lr {:.3e}", e.epoch, e.recon_loss, e.lr);
        let last = pt.epoch == cfg.optim.epochs;
        if last || (cfg.checkpoint_every > 0 && pt.epoch % cfg.checkpoint_every == 0) {
            let ev = eval(&pt)?;
            evlog.row(&format!("{},{ev}", pt.epoch))?;
            pt.checkpoint(extra.clone())?.save(&a.out.join(epoch_ckpt_name(pt.epoch)))?;
        }
    }
    pt.checkpoint(extra)?.save(&a.out.join(FINAL_CKPT))?;
    Ok(())
}

fn finetune_flags(a: &FinetuneArgs) -> Vec<(String, String)> {
    let mut flags = Vec::new();
    if let Some(m) = &a.mode {
        flags.push(pair("mode", m));
    }
    if let Some(v) = a.alpha {
        flags.push(pair("alpha", v));
    }
    if let Some(v) = a.label_fraction {
        flags.push(pair("label_fraction", v));
    }
    if let Some(v) = a.repeats {
        flags.push(pair("repeats", v));
    }
    if let Some(v) = a.epochs {
        flags.push(pair("epochs", v));
    }
    flags
}

pub fn cmd_finetune(g: &GlobalArgs, a: &FinetuneArgs) -> CliResult<()> {
    let cfg = g.resolve(Phase::Finetune, None, finetune_flags(a))?;
    match cfg.precision {
        Precision::F32 => finetune_run::<f32>(&cfg, a).map(|_| ()),
        Precision::F64 => finetune_run::<f64>(&cfg, a).map(|_| ()),
    }
}

/// Copies every non-classifier tensor of `ck` into `model`.
fn load_encoder<T: Real>(model: &mut EcgNat<T>, ck: &Checkpoint<T>) -> CliResult<()> {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        if name.starts_with("head.") {
            continue;
        }
        let src = ck
            .get(&name)
            .ok_or_else(|| CliError::Runtime(format!("initial checkpoint lacks tensor {name}")))?;
        let dst = model.params.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(CliError::Runtime(format!(
                "tensor {name}: checkpoint shape {:?}, model expects {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

fn finetune_run<T: Real>(cfg: &RunConfig, a: &FinetuneArgs) -> CliResult<Vec<EvalResult>> {
    let init = a.init.as_deref().map(load_checkpoint::<T>).transpose()?;
    if let Some(ck) = &init {
        let stored = checkpoint_model_config(ck)?;
        let mut pinned = cfg.clone();
        pinned.explicit = ARCH_KEYS.iter().map(|k| k.to_string()).collect();
        let diffs = pinned.model_mismatches(&stored, ARCH_KEYS);
        if !diffs.is_empty() {
            return Err(CliError::Validation(diffs));
        }
    }
    let man = read_manifest(&a.manifest)?;
    let all: Vec<usize> = (0..man.rows.len()).collect();
    let labels = require_labels(&man, &a.manifest, &all, cfg.model.n_classes)?;
    let (xs, _) = load_inputs::<T>(&man, &all, &cfg.model)?;
    let splits = if cfg.repeats == 1 {
        vec![(man.indices(Split::Train), man.indices(Split::Test))]
    } else {
        data::split(all.len(), cfg.train_frac, cfg.seed, cfg.repeats)?
    };
    create_dir(&a.out)?;
    let linear = cfg.mode == FinetuneMode::LinearEval;
    let mut results = Vec::new();
    for (r, (train, test)) in splits.into_iter().enumerate() {
        let seed = cfg.seed + r as u64;
        let train = if cfg.label_fraction < 1.0 {
            data::label_subsample(&train, &labels, cfg.label_fraction, seed)?
        } else {
            train
        };
        if train.is_empty() || test.is_empty() {
            return Err(CliError::Validation(vec![format!(
                "repeat {r}: {} train and {} test rows; both must be non-empty",
                train.len(),
                test.len()
            )]));
        }
        let mut model = EcgNat::<T>::new(cfg.model.clone(), &mut rng_for(seed, INIT_DOMAIN, 0))?;
        if let Some(ck) = &init {
            load_encoder(&mut model, ck)?;
        }
        let fc = FinetuneConfig {
            mode: cfg.mode,
            alpha: cfg.model.alpha,
            tau: cfg.model.tau,
            optim: cfg.optim,
            seed,
        };
        let mut ft = Finetuner::new(model, fc, train.len())?;
        let pick = |idx: &[usize]| -> Vec<Tensor<T>> { idx.iter().map(|&i| xs[i].clone()).collect() };
        let (xtr, xte) = (pick(&train), pick(&test));
        let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let (ztr, zte) = if linear {
            (ft.latents(&xtr)?, ft.latents(&xte)?)
        } else {
            (Vec::new(), Vec::new())
        };
        let (in_tr, in_te) = if linear {
            (Inputs::Latents(&ztr), Inputs::Latents(&zte))
        } else {
            (Inputs::Signals(&xtr), Inputs::Signals(&xte))
        };

        let dir = a.out.join(format!("repeat{r}"));
        create_dir(&dir)?;
        let header = json!({
            "command": "finetune",
            "config": cfg,
            "manifest": a.manifest,
            "init": a.init,
            "repeat": r,
            "train_size": train.len(),
            "test_size": test.len(),
        });
        let mut log = CsvLog::create(&dir.join(FINETUNE_LOG), &header, FINETUNE_CSV_HEADER)?;
        let mut probs = Vec::new();
        for _ in 0..cfg.optim.epochs {
            let e = ft.train_epoch(in_tr, &ytr)?;
            probs = ft.predict(in_te)?;
            let acc = accuracy_of(&probs, &yte);
            log.row(&e.csv_row(acc))?;
            log::info!(
                "repeat {r} epoch {}: loss {:.5} train acc {:.3} test acc {acc:.3}",
                e.epoch,
                e.total_loss,
                e.train_acc
            );
        }
        if probs.is_empty() {
            probs = ft.predict(in_te)?;
        }
        let result = EvalResult::compute(&probs, &yte, cfg.model.n_classes)?;
        let extra = json!({
            "config": cfg,
            "manifest": a.manifest,
            "repeat": r,
            "train_rows": train,
            "test_rows": test,
        });
        ft.checkpoint(extra)?.save(&dir.join(FINAL_CKPT))?;
        results.push(result);
    }
    let report = json!({ "config": cfg, "repeats": results });
    write_file(&a.out.join("results.json"), &format!("{}\n", pretty(&report)))?;
    write_file(&a.out.join("summary.csv"), &summary_csv(&results))?;
    Ok(results)
}

/// Model keys that must agree between a checkpoint and the configuration.
const EVAL_KEYS: &[&str] = &[
    "n_leads",
    "input_len",
    "embed_dim",
    "stage_heads",
    "mlp_ratio",
    "window_k",
    "blocks_per_stage",
    "n_classes",
];

pub fn cmd_eval(g: &GlobalArgs, a: &EvalArgs) -> CliResult<EvalResult> {
    let cfg = g.resolve(Phase::Other, None, Vec::new())?;
    match checkpoint_dtype(&a.checkpoint)? {
        DType::F32 => eval_run::<f32>(&cfg, a),
        DType::F64 => eval_run::<f64>(&cfg, a),
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (std::fs::canonicalize(a), std::fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn eval_run<T: Real>(cfg: &RunConfig, a: &EvalArgs) -> CliResult<EvalResult> {
    let ck = Checkpoint::<T>::load(&a.checkpoint)?;
    let stored = checkpoint_model_config(&ck)?;
    let diffs = cfg.model_mismatches(&stored, EVAL_KEYS);
    if !diffs.is_empty() {
        return Err(CliError::Validation(diffs));
    }
    let model = load_model(&ck, stored.clone())?;
    let man = read_manifest(&a.manifest)?;
    let extra = ck.meta.get("extra").cloned().unwrap_or(Value::Null);
    // Rows recorded by fine-tuning win when they refer to this manifest.
    let recorded = |key: &str| -> Option<Vec<usize>> {
        let m: PathBuf = serde_json::from_value(extra.get("manifest")?.clone()).ok()?;
        same_file(&m, &a.manifest)
            .then(|| serde_json::from_value(extra.get(key)?.clone()).ok())
            .flatten()
    };
    let rows = match a.split {
        SplitArg::Test => recorded("test_rows").unwrap_or_else(|| man.indices(Split::Test)),
        SplitArg::Train => recorded("train_rows").unwrap_or_else(|| man.indices(Split::Train)),
        SplitArg::All => (0..man.rows.len()).collect(),
    };
    if rows.iter().any(|&i| i >= man.rows.len()) {
        return Err(CliError::Validation(vec![format!(
            "{}: checkpoint refers to rows beyond the manifest's {}",
            a.manifest.display(),
            man.rows.len()
        )]));
    }
    if rows.is_empty() {
        return Err(CliError::Validation(vec![format!("{}: no rows to evaluate", a.manifest.display())]));
    }
    let labels = require_labels(&man, &a.manifest, &rows, stored.n_classes)?;
    let (xs, _) = load_inputs::<T>(&man, &rows, &stored)?;
    let probs = predict(&model, Inputs::Signals(&xs))?;
    let result = EvalResult::compute(&probs, &labels, stored.n_classes)?;
    let text = format!("{}\n", serde_json::to_string_pretty(&result).expect("metrics serialise"));
    match &a.out {
        Some(p) => write_file(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = &a.dump_embeddings {
        let embs = embeddings(&model, &xs)?;
        let d = embs.first().map_or(0, Vec::len);
        let mut out = String::from("label");
        (0..d).for_each(|j| out.push_str(&format!(",e{j}")));
        out.push('\n');
        for (y, e) in labels.iter().zip(&embs) {
            out.push_str(&y.to_string());
            e.iter().for_each(|v| out.push_str(&format!(",{v}")));
            out.push('\n');
        }
        write_file(p, &out)?;
    }
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub params: ParamCount,
    /// Attention FLOPs of one encoder forward: neighborhood, global reference.
    pub model_attention_flops: (u64, u64),
    pub rows: Vec<BenchRow>,
}

pub fn cmd_bench(g: &GlobalArgs, a: &BenchArgs) -> CliResult<BenchReport> {
    let cfg = g.resolve(Phase::Other, None, Vec::new())?;
    let m = &cfg.model;
    let params = count_params(m);
    println!(
        "parameters: total {} (encoder {}, decoder {}, classifier {})",
        params.total(),
        params.encoder(),
        params.decoder,
        params.classifier
    );
    println!(
        "  tokenizer {}, blocks {}, downsamplers {}; fine-tuning uses {}",
        params.tokenizer,
        params.blocks,
        params.downsamplers,
        params.finetune()
    );
    let (mut na, mut global) = (0u64, 0u64);
    for (s, &(c, n)) in m.stage_shapes().iter().enumerate() {
        let heads = m.stage_heads[s];
        na += m.blocks_per_stage as u64 * natten::na_flops(heads, n, m.window_k, c / heads);
        global += m.blocks_per_stage as u64 * natten::reference_flops(heads, n, c / heads);
    }
    println!("{}", natten::BENCH_FLOP_NOTE);
    println!("model attention flops per encoder forward: neighborhood {na}, global {global}");

    let rows = natten::bench_scaling(
        a.window,
        &a.lengths,
        a.head_dim,
        a.heads,
        a.repeats,
        a.min_sample_ms,
        cfg.seed,
    )?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&a.out, &natten::bench_csv(&rows))?;
    println!("{:>6} {:>14} {:>12} {:>8}", "n", "impl", "median_ms", "ratio");
    for imp in [natten::BenchImpl::Neighborhood, natten::BenchImpl::Reference] {
        let mut prev: Option<f64> = None;
        for r in rows.iter().filter(|r| r.imp == imp) {
            let med = r.median_ms();
            let ratio = prev.map_or(String::from("-"), |p| format!("{:.2}", med / p));
            println!("{:>6} {:>14} {:>12.4} {:>8}", r.n, imp.name(), med, ratio);
            prev = Some(med);
        }
    }
    Ok(BenchReport {
        params,
        model_attention_flops: (na, global),
        rows,
    })
}

/// Median time ratios between consecutive lengths for one implementation.
pub fn doubling_ratios(rows: &[BenchRow], imp: natten::BenchImpl) -> Vec<f64> {
    let meds: Vec<f64> = rows.iter().filter(|r| r.imp == imp).map(BenchRow::median_ms).collect();
    meds.windows(2).map(|w| w[1] / w[0]).collect()
}
