//! Command-line front end.
//!
//! Effective configuration, lowest to highest precedence: built-in
//! defaults, the checkpoint's stored config (commands that read one),
//! `--config` file, `--set key=value`, then dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use tsf_core::data::Split;

use crate::ablation::{run_ablation, to_csv, AblationGrid};
use crate::bench::complexity_report;
use crate::config::RunConfig;
use crate::formats::{load_dataset, save_dataset, Checkpoint};
use crate::maps::export_correlation_maps;
use crate::pipeline::{evaluate_checkpoint, generate, log_csv, train_run, MetricsFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tsf", version, about = "Semantic-filter few-shot experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (TSFDS1) into --out.
    GenData,
    /// Train on the base split of --data; checkpoint to --out.
    Train,
    /// Evaluate --ckpt on --data; metrics JSON to stdout and --out.{json,csv}.
    Eval,
    /// Sweep `axis` over `values` for every seed; CSV to --out or stdout.
    Ablate,
    /// Attention cost and neck size per variant; report to --out.{txt,json}.
    Bench,
    /// Export correlation maps of --ckpt for novel images of --data into --out.
    ExportMaps,
    /// Run built-in oracle and gradient checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct Flags {
    /// key = value config file.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Extra `key=value` override (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<String>,
    #[arg(long, global = true)]
    pub data: Option<String>,
    #[arg(long, global = true)]
    pub ckpt: Option<String>,
    #[arg(long, global = true)]
    pub neck: Option<String>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long = "n-filter", global = true)]
    pub n_filter: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long = "n-way", global = true)]
    pub n_way: Option<usize>,
    #[arg(long = "k-shot", global = true)]
    pub k_shot: Option<usize>,
    #[arg(long = "q-per-class", global = true)]
    pub q_per_class: Option<usize>,
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub steps: Option<usize>,
}

/// Problems with the invocation itself, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl Flags {
    /// Applies config file, `--set` and flags on top of `base`.
    pub fn resolve(&self, mut cfg: RunConfig) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {path}: {e}")))?;
            cfg.apply_text(&text).map_err(|e| usage(format!("{path}: {e:#}")))?;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k.trim(), v).map_err(|e| usage(format!("{e:#}")))?;
        }
        let pairs: [(&str, Option<String>); 16] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("out", self.out.clone()),
            ("data", self.data.clone()),
            ("ckpt", self.ckpt.clone()),
            ("neck", self.neck.clone()),
            ("heads", self.heads.map(|v| v.to_string())),
            ("n_filter", self.n_filter.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("temperature", self.temperature.map(|v| v.to_string())),
            ("n_way", self.n_way.map(|v| v.to_string())),
            ("k_shot", self.k_shot.map(|v| v.to_string())),
            ("q_per_class", self.q_per_class.map(|v| v.to_string())),
            ("episodes", self.episodes.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v).map_err(|e| usage(format!("--{}: {e:#}", k.replace('_', "-"))))?;
            }
        }
        Ok(cfg)
    }
}

fn required<'a>(value: &'a str, flag: &str) -> Result<&'a str> {
    if value.is_empty() {
        Err(usage(format!("this command needs --{flag}")))
    } else {
        Ok(value)
    }
}

fn log_effective(cfg: &RunConfig) {
    info!("effective config (fingerprint {}):\n{}", cfg.fingerprint(), cfg.to_text());
}

fn load_checkpoint(flags: &Flags) -> Result<Checkpoint> {
    let path = flags.ckpt.as_deref().ok_or_else(|| usage("this command needs --ckpt"))?;
    Checkpoint::load(path)
}

pub fn run(cli: &Cli) -> Result<()> {
    match cli.command {
        Command::GenData => {
            let cfg = cli.flags.resolve(RunConfig::default())?;
            log_effective(&cfg);
            let out = required(&cfg.out, "out")?;
            let bundle = generate(&cfg)?;
            save_dataset(out, &bundle)?;
            println!("wrote {} images to {out}", bundle.len());
        }
        Command::Train => {
            let cfg = cli.flags.resolve(RunConfig::default())?;
            log_effective(&cfg);
            let out = required(&cfg.out, "out")?.to_string();
            let bundle = load_dataset(required(&cfg.data, "data")?)?;
            let run = train_run(&cfg, &bundle)?;
            run.checkpoint.save(&out)?;
            let log_path = format!("{out}.log.csv");
            std::fs::write(&log_path, log_csv(&run.log)?).with_context(|| format!("writing {log_path}"))?;
            println!("wrote checkpoint {out} and training log {log_path}");
        }
        Command::Eval => {
            let ckpt = load_checkpoint(&cli.flags)?;
            let cfg = cli.flags.resolve(ckpt.config.clone())?;
            log_effective(&cfg);
            let bundle = load_dataset(required(&cfg.data, "data")?)?;
            let record = evaluate_checkpoint(&ckpt, &cfg, &bundle)?;
            let file = MetricsFile::new(&record, &cfg);
            if !cfg.out.is_empty() {
                file.save(&cfg.out)?;
            }
            print!("{}", file.to_json());
        }
        Command::Ablate => {
            let cfg = cli.flags.resolve(RunConfig::default())?;
            log_effective(&cfg);
            let bundle = load_dataset(required(&cfg.data, "data")?)?;
            let rows = run_ablation(&AblationGrid::from_config(&cfg), &bundle, cfg.threads)?;
            let csv = to_csv(&rows)?;
            if cfg.out.is_empty() {
                print!("{csv}");
            } else {
                std::fs::write(&cfg.out, &csv).with_context(|| format!("writing {}", cfg.out))?;
                println!("wrote {} rows to {}", rows.len(), cfg.out);
            }
            if rows.iter().any(|r| r.status != "ok") {
                bail!("some ablation cells failed; see the status column");
            }
        }
        Command::Bench => {
            let cfg = cli.flags.resolve(RunConfig::default())?;
            log_effective(&cfg);
            let report = complexity_report(
                cfg.bench_h,
                cfg.bench_w,
                cfg.bench_c,
                cfg.n_filter,
                &cfg.bench_heads.0,
                cfg.bench_runs,
                cfg.bench_warmup,
            )?;
            print!("{}", report.to_text());
            if !cfg.out.is_empty() {
                std::fs::write(format!("{}.txt", cfg.out), report.to_text())?;
                std::fs::write(format!("{}.json", cfg.out), report.to_json())?;
            }
        }
        Command::ExportMaps => {
            let ckpt = load_checkpoint(&cli.flags)?;
            let cfg = cli.flags.resolve(ckpt.config.clone())?;
            log_effective(&cfg);
            let out = required(&cfg.out, "out")?;
            let bundle = load_dataset(required(&cfg.data, "data")?)?;
            crate::formats::check_compatible(&ckpt, &bundle)?;
            let picks: Vec<usize> = (0..bundle.len()).filter(|&i| bundle.splits[i] == Split::Novel).take(cfg.map_images).collect();
            let images: Vec<_> = picks.iter().map(|&i| bundle.image(i)).collect();
            let refs: Vec<_> = images.iter().collect();
            let batch = tsf_core::Tensor::stack(&refs)?;
            let files = export_correlation_maps(&ckpt.model, &batch, Path::new(out))?;
            println!("wrote {} grids for {} images to {out}", files.len(), picks.len());
        }
        Command::Selftest => {
            let results = crate::selftest::run_all();
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            println!("{} passed, {failed} failed", results.len() - failed);
            if failed > 0 {
                bail!("{failed} self-test checks failed");
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
