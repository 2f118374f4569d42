//! End-to-end runs of every subcommand on a tiny synthetic corpus.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ecgnat_cli::runlog::{read_column, read_header, read_rows};
use ecgnat_cli::{run_args, CliError};

const MINI: &str = "# tiny model for fast runs\n\
embed_dim=8\n\
stage_heads=1,2,4,8\n\
blocks_per_stage=1\n\
n_classes=3\n\
batch_size=4\n\
seed=3\n";

fn run(args: &[&str]) -> Result<(), CliError> {
    run_args(args.iter().copied())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus of 4 records per class plus the mini config, built once.
fn corpus() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_corpus");
        let _ = std::fs::remove_dir_all(&dir);
        run(&["synth", "--out", s(&dir), "--n-per-class", "4", "--seed", "11"]).unwrap();
        std::fs::write(dir.join("mini.cfg"), MINI).unwrap();
        dir
    })
}

fn manifest() -> PathBuf {
    corpus().join("manifest.csv")
}

fn mini_cfg() -> PathBuf {
    corpus().join("mini.cfg")
}

fn pretrain(out: &Path, extra: &[&str]) -> Result<(), CliError> {
    let mut args: Vec<String> = [
        "pretrain",
        "--config",
        s(&mini_cfg()),
        "--manifest",
        s(&manifest()),
        "--out",
        s(out),
    ]
    .iter()
    .map(|a| a.to_string())
    .collect();
    args.extend(extra.iter().map(|a| a.to_string()));
    run_args(args)
}

fn pretrained() -> &'static PathBuf {
    static CKPT: OnceLock<PathBuf> = OnceLock::new();
    CKPT.get_or_init(|| {
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli_pretrained");
        let _ = std::fs::remove_dir_all(&out);
        pretrain(&out, &["--epochs", "2"]).unwrap();
        out.join("final.ckpt")
    })
}

fn finetune(out: &Path, extra: &[&str]) -> Result<(), CliError> {
    let mut args: Vec<String> = [
        "finetune",
        "--config",
        s(&mini_cfg()),
        "--manifest",
        s(&manifest()),
        "--out",
        s(out),
    ]
    .iter()
    .map(|a| a.to_string())
    .collect();
    args.extend(extra.iter().map(|a| a.to_string()));
    run_args(args)
}

fn files_in(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_a_reproducible_corpus() {
    let dir = corpus();
    let rows = std::fs::read_to_string(dir.join("manifest.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 12);
    let records = std::fs::read_dir(dir.join("records")).unwrap().count();
    assert_eq!(records, 2 * 12);

    let again = tempfile::tempdir().unwrap();
    run(&["synth", "--out", s(again.path()), "--n-per-class", "4", "--seed", "11"]).unwrap();
    let ours: Vec<_> = files_in(dir).into_iter().filter(|(p, _)| p != Path::new("mini.cfg")).collect();
    assert_eq!(ours, files_in(again.path()));
}

#[test]
fn pretrain_logs_header_and_rows() {
    let out = tempfile::tempdir().unwrap();
    pretrain(out.path(), &["--epochs", "2"]).unwrap();
    let log = out.path().join("pretrain_log.csv");
    let header = read_header(&log).unwrap();
    assert_eq!(header["command"], "pretrain");
    assert_eq!(header["config"]["model"]["embed_dim"], 8);
    assert_eq!(header["config"]["seed"], 3);
    let epochs = read_column(&log, "epoch").unwrap();
    assert_eq!(epochs, vec![0.0, 1.0, 2.0]);
    assert!(read_column(&log, "recon_loss").unwrap().iter().all(|v| v.is_finite()));
    assert!(out.path().join("final.ckpt").exists());
    assert!(out.path().join("ckpt_epoch0002.ckpt").exists());
    assert_eq!(read_column(&out.path().join("recon_eval.csv"), "epoch").unwrap(), vec![0.0, 2.0]);

    // The log header alone replays the run.
    let replay = tempfile::tempdir().unwrap();
    run_args([
        "pretrain",
        "--config",
        s(&log),
        "--manifest",
        s(&manifest()),
        "--out",
        s(replay.path()),
    ])
    .unwrap();
    assert_eq!(
        std::fs::read(&log).unwrap(),
        std::fs::read(replay.path().join("pretrain_log.csv")).unwrap()
    );
}

#[test]
fn identical_seeds_give_identical_logs_and_resume_continues_exactly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let flags = ["--epochs", "4", "--set", "checkpoint_every=2"];
    pretrain(a.path(), &flags).unwrap();
    pretrain(b.path(), &flags).unwrap();
    let log = |d: &Path| std::fs::read(d.join("pretrain_log.csv")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));

    let c = tempfile::tempdir().unwrap();
    let mid = a.path().join("ckpt_epoch0002.ckpt");
    pretrain(c.path(), &["--resume", s(&mid)]).unwrap();
    let full = read_rows(&a.path().join("pretrain_log.csv")).unwrap();
    let resumed = read_rows(&c.path().join("pretrain_log.csv")).unwrap();
    assert_eq!(resumed, full[3..].to_vec());
    assert_eq!(
        std::fs::read(a.path().join("final.ckpt")).unwrap(),
        std::fs::read(c.path().join("final.ckpt")).unwrap()
    );

    // Overrides that would change the run are refused.
    let d = tempfile::tempdir().unwrap();
    let err = pretrain(d.path(), &["--resume", s(&mid), "--set", "lr=0.5"]).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
}

#[test]
fn zero_mask_ablation_switches_the_corruption() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pretrain(a.path(), &["--epochs", "1"]).unwrap();
    pretrain(b.path(), &["--epochs", "1", "--ablation", "zero-mask"]).unwrap();
    let la = a.path().join("pretrain_log.csv");
    let lb = b.path().join("pretrain_log.csv");
    assert_eq!(read_header(&lb).unwrap()["config"]["ablation"], "zero-mask");
    assert_eq!(read_header(&la).unwrap()["config"]["ablation"], "none");
    assert_ne!(read_column(&la, "recon_loss").unwrap(), read_column(&lb, "recon_loss").unwrap());
}

#[test]
fn invalid_configuration_lists_every_problem() {
    let out = tempfile::tempdir().unwrap();
    let err = pretrain(
        out.path(),
        &["--set", "embed_dim=7", "--set", "bogus=1", "--set", "window_k=4", "--set", "lr=-1"],
    )
    .unwrap_err();
    match &err {
        CliError::Validation(errs) => {
            for needle in ["embed_dim", "bogus", "window_k", "lr must be positive"] {
                assert!(errs.iter().any(|e| e.contains(needle)), "{needle} missing from {errs:?}");
            }
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(err.exit_code(), 1);
    assert!(!out.path().join("pretrain_log.csv").exists());
}

#[test]
fn alpha_zero_drops_the_contrastive_term() {
    let out = tempfile::tempdir().unwrap();
    finetune(out.path(), &["--init", s(pretrained()), "--alpha", "0", "--epochs", "2"]).unwrap();
    let log = out.path().join("repeat0/finetune_log.csv");
    let sc = read_column(&log, "supcon").unwrap();
    assert_eq!(sc, vec![0.0, 0.0]);
    assert_eq!(read_column(&log, "total_loss").unwrap(), read_column(&log, "ce").unwrap());
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(results["repeats"].as_array().unwrap().len(), 1);
    let summary = std::fs::read_to_string(out.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("metric,mean,std,repeats\n"));
}

#[test]
fn label_fraction_and_repeats() {
    let out = tempfile::tempdir().unwrap();
    finetune(
        out.path(),
        &["--label-fraction", "0.4", "--repeats", "2", "--epochs", "1", "--mode", "linear_eval"],
    )
    .unwrap();
    for r in 0..2 {
        let header = read_header(&out.path().join(format!("repeat{r}/finetune_log.csv"))).unwrap();
        // 0.8 of 12 records split, then 40% of each class kept.
        assert!(header["train_size"].as_u64().unwrap() <= 6, "{header}");
        assert_eq!(header["test_size"], 2);
        assert_eq!(header["config"]["mode"], "linear_eval");
    }
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(results["repeats"].as_array().unwrap().len(), 2);
}

#[test]
fn finetune_rejects_unlabeled_rows_and_foreign_architectures() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(manifest()).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // path,label,split: blank out one label.
    let parts: Vec<&str> = lines[1].split(',').collect();
    let abs = corpus().join(parts[0]);
    lines[1] = format!("{},,{}", abs.display(), parts[2]);
    for l in lines.iter_mut().skip(2) {
        let p: Vec<&str> = l.split(',').collect();
        *l = format!("{},{},{}", corpus().join(p[0]).display(), p[1], p[2]);
    }
    let bad = dir.path().join("unlabeled.csv");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("out");
    let err = run_args([
        "finetune",
        "--config",
        s(&mini_cfg()),
        "--manifest",
        s(&bad),
        "--out",
        s(&out),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("no label"), "{err}");

    let err = finetune(&dir.path().join("arch"), &["--init", s(pretrained()), "--set", "embed_dim=16"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("embed_dim=8") && err.to_string().contains("embed_dim=16"), "{err}");
}

#[test]
fn eval_is_deterministic_and_checks_class_count() {
    let out = tempfile::tempdir().unwrap();
    finetune(out.path(), &["--init", s(pretrained()), "--epochs", "1"]).unwrap();
    let ck = out.path().join("repeat0/final.ckpt");
    let eval = |name: &str, extra: &[&str]| {
        let dest = out.path().join(name);
        let mut args = vec![
            "eval".to_string(),
            "--checkpoint".into(),
            s(&ck).into(),
            "--manifest".into(),
            s(&manifest()).into(),
            "--out".into(),
            s(&dest).into(),
        ];
        args.extend(extra.iter().map(|a| a.to_string()));
        run_args(args).map(|_| std::fs::read_to_string(&dest).unwrap())
    };
    let emb = out.path().join("emb.csv");
    let first = eval("a.json", &["--dump-embeddings", s(&emb)]).unwrap();
    let second = eval("b.json", &[]).unwrap();
    assert_eq!(first, second);
    let json: serde_json::Value = serde_json::from_str(&first).unwrap();
    for key in ["accuracy", "macro_f1", "auroc", "per_class"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let rows: Vec<String> = std::fs::read_to_string(&emb).unwrap().lines().map(String::from).collect();
    let header = read_header(&out.path().join("repeat0/finetune_log.csv")).unwrap();
    assert_eq!(rows.len() - 1, header["test_size"].as_u64().unwrap() as usize);
    assert!(rows[0].starts_with("label,e0,"));
    // Pooled embedding width is the latent channel count.
    assert_eq!(rows[1].split(',').count(), 1 + 64);

    let err = eval("c.json", &["--set", "n_classes=5"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let msg = err.to_string();
    assert!(msg.contains("n_classes=3") && msg.contains("n_classes=5"), "{msg}");
}

#[test]
fn bench_reports_both_implementations_at_every_length() {
    let out = tempfile::tempdir().unwrap();
    let csv = out.path().join("bench.csv");
    run(&[
        "bench",
        "--out",
        s(&csv),
        "--lengths",
        "16,32",
        "--repeats",
        "2",
        "--min-sample-ms",
        "0.1",
        "--head-dim",
        "4",
        "--heads",
        "2",
        "--window",
        "5",
    ])
    .unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# flops_est"));
    assert_eq!(lines.next().unwrap(), "n,impl,flops_est,mean_ms,std_ms");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let n: u64 = r[0].parse().unwrap();
        let flops: u64 = r[2].parse().unwrap();
        let want = match r[1] {
            "na_forward" => 2 * n * 5 * (4 * 4 + 5),
            "na_reference" => 2 * n * n * (4 * 4 + 5),
            other => panic!("{other}"),
        };
        assert_eq!(flops, want);
    }
}

#[test]
fn verify_quick_passes_and_counts_each_suite() {
    let report = ecgnat_cli::verify::run_suites(ecgnat_cli::Level::Quick, 0);
    assert!(report.ok(), "{}", report.render());
    let names: Vec<&str> = report.suites.iter().map(|s| s.name).collect();
    for want in ["kernel_oracle", "grad_primitives", "grad_kernel", "loss_identities", "metric_oracles", "fault_injection"] {
        assert!(names.contains(&want), "{want}");
    }
    assert!(report.suites.iter().all(|s| s.total > 0));
    assert!(report.render().contains("fault_injection"));
}

#[test]
fn exit_codes() {
    let err = run(&["frobnicate"]).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let err = run(&["eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", "/nonexistent.csv"]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert_eq!(CliError::Verification("x".into()).exit_code(), 3);
}
