//! `ecgnat` command line: synthetic corpus generation, pretraining,
//! fine-tuning, evaluation, kernel benchmarks and self-verification.
//!
//! Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
//! 3 verification failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod runlog;
pub mod verify;

pub use config::{Phase, Precision, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Validation(Vec<String>),
    Runtime(String),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(errs) => {
                write!(f, "invalid configuration ({} problem(s)):", errs.len())?;
                for e in errs {
                    write!(f, "\n  - {e}")?;
                }
                Ok(())
            }
            CliError::Runtime(m) => write!(f, "{m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ecgnat::Error> for CliError {
    fn from(e: ecgnat::Error) -> Self {
        match e {
            ecgnat::Error::Config(m) => CliError::Validation(vec![m]),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ecgnat", version, about = "ECG-NAT: neighborhood-attention transformer for multi-lead ECG")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Config file of `key=value` lines, or a run log to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 keeps the runtime default.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labeled synthetic corpus with a train/test manifest.
    Synth(SynthArgs),
    /// Masked-autoencoder pretraining.
    Pretrain(PretrainArgs),
    /// Dual-loss fine-tuning or linear evaluation.
    Finetune(FinetuneArgs),
    /// Metrics of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Parameter counts, FLOP estimates and attention kernel timings.
    Bench(BenchArgs),
    /// Oracle, gradient and identity checks.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub n_per_class: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Manifest whose train rows form one dataset; repeatable.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a pretraining checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_parser = ["none", "zero-mask"])]
    pub ablation: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained checkpoint supplying the encoder; random init otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, value_parser = ["linear_eval", "full_finetune"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub label_fraction: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV of `label,e0,e1,...`, one row per evaluated sample.
    #[arg(long)]
    pub dump_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Timing CSV destination.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    pub window: usize,
    #[arg(long, default_value_t = 32)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    /// Each timing sample loops until it spans at least this long.
    #[arg(long, default_value_t = 20.0)]
    pub min_sample_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Level::Quick)]
    pub level: Level,
}

impl GlobalArgs {
    /// Global flags as override pairs.
    fn pairs(&self) -> CliResult<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut errors = Vec::new();
        for s in &self.set {
            match config::parse_override(s) {
                Ok(p) => out.push(p),
                Err(e) => errors.push(e),
            }
        }
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(t) = self.threads {
            out.push(("threads".into(), t.to_string()));
        }
        if let Some(p) = &self.precision {
            out.push(("precision".into(), p.clone()));
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(CliError::Validation(errors))
        }
    }

    /// Fully resolved configuration: `base`, the config file, `--set` and
    /// global flags, then the command's own flags.
    pub fn resolve(&self, phase: Phase, base: Option<RunConfig>, command_flags: Vec<(String, String)>) -> CliResult<RunConfig> {
        let mut layers = Vec::new();
        if let Some(path) = &self.config {
            layers.push((path.display().to_string(), config::read_config_file(path)?));
        }
        let mut flags = self.pairs()?;
        flags.extend(command_flags);
        layers.push(("flags".to_string(), flags));
        let env = std::env::var("ECGNAT_SEED").ok();
        let cfg = RunConfig::resolve(phase, base, &layers, env.as_deref())?;
        set_threads(cfg.threads);
        Ok(cfg)
    }
}

/// Sizes the global worker pool once; later calls keep the first size.
fn set_threads(n: usize) {
    if n > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::debug!("worker pool already initialised: {e}");
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => commands::cmd_synth(g, a),
        Command::Pretrain(a) => commands::cmd_pretrain(g, a),
        Command::Finetune(a) => commands::cmd_finetune(g, a),
        Command::Eval(a) => commands::cmd_eval(g, a).map(|_| ()),
        Command::Bench(a) => commands::cmd_bench(g, a).map(|_| ()),
        Command::Verify(a) => verify::cmd_verify(g, a).map(|_| ()),
    }
}

/// Parses `args` (without the program name) and runs the command.
pub fn run_args<I, S>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("ecgnat")).chain(args.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::Validation(vec![e.to_string()]))?;
    run(cli)
}
