//! Generate, train and evaluate from a [`RunConfig`].

use std::io::Write;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use log::{debug, info};
use serde::Serialize;
use tsf_core::data::{synth_generate, DatasetBundle, Episode, MetricsRecord, Split};
use tsf_core::patchproto::{eval_episode, train, EvalProtocol, LogEntry, PatchProto, SplitEmbeddings};
use tsf_core::rng::fnv1a;

use crate::config::RunConfig;
use crate::formats::{write_dataset, Checkpoint};

pub fn generate(cfg: &RunConfig) -> Result<DatasetBundle> {
    Ok(synth_generate(&cfg.gen_config(), cfg.seed)?)
}

/// Digest of a bundle's TSFDS1 encoding.
pub fn dataset_hash(bundle: &DatasetBundle) -> String {
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, bundle).expect("writing to memory cannot fail");
    format!("{:016x}", fnv1a(&bytes))
}

pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Builds and trains a model on the base split of `bundle`.
pub fn train_run(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<TrainedRun> {
    let (ch, h, w) = bundle.image_dims();
    ensure!(h == w, "square images required, got {h}x{w}");
    let global_classes = bundle.classes(Split::Base).len();
    let model_cfg = cfg.model_config(ch, h, global_classes);
    let model = PatchProto::new(model_cfg, cfg.seed)?;
    info!(
        "training {} neck, {} steps, {} learnables",
        cfg.neck,
        cfg.steps,
        model.params.count_scalars("")
    );
    let outcome = train(model, bundle, &cfg.train_config(), cfg.seed)?;
    if let Some(last) = outcome.log.last() {
        info!("final loss {:.6}", last.loss);
    }
    for e in &outcome.log {
        debug!("step {} lr {} loss {:.6} grad_norm {:.4}", e.step, e.lr, e.loss, e.grad_norm);
    }
    Ok(TrainedRun {
        checkpoint: Checkpoint {
            config: cfg.portable(),
            model: outcome.model,
        },
        log: outcome.log,
    })
}

/// Per-episode accuracies of `protocol`, scored on `threads` workers.
/// Episode `i` always comes from the same stream and results are kept in
/// episode order, so the output does not depend on `threads`.
pub fn evaluate_parallel(
    model: &PatchProto,
    bundle: &DatasetBundle,
    protocol: &EvalProtocol,
    seed: u64,
    threads: usize,
) -> Result<Vec<f64>> {
    let cache = SplitEmbeddings::new(model, bundle, protocol.split)?;
    let threads = threads.max(1).min(protocol.episodes.max(1));
    let score = |i: usize| -> Result<f64> {
        let episode: Episode = eval_episode(bundle, protocol, seed, i)?;
        Ok(cache.accuracy(model, &episode)?)
    };
    if threads == 1 {
        return (0..protocol.episodes).map(score).collect();
    }
    let chunk = protocol.episodes.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let score = &score;
                s.spawn(move || {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(protocol.episodes);
                    (lo..hi).map(score).collect::<Result<Vec<f64>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(protocol.episodes);
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig, bundle: &DatasetBundle) -> Result<MetricsRecord> {
    crate::formats::check_compatible(ckpt, bundle)?;
    let protocol = cfg.protocol();
    let acc = evaluate_parallel(&ckpt.model, bundle, &protocol, cfg.seed, cfg.threads)?;
    Ok(MetricsRecord::from_accuracies(&acc, &cfg.fingerprint())?)
}

/// Serialized form of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricsFile {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    pub config_hash: String,
    pub neck: String,
    pub split: String,
    pub n_way: usize,
    pub k_shot: usize,
}

impl MetricsFile {
    pub fn new(record: &MetricsRecord, cfg: &RunConfig) -> Self {
        Self {
            mean_accuracy: record.mean_accuracy,
            ci95: record.ci95,
            episodes: record.episodes,
            config_hash: record.config_hash.clone(),
            neck: cfg.neck.to_string(),
            split: cfg.eval_split.to_string(),
            n_way: cfg.n_way,
            k_shot: cfg.k_shot,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    /// Writes `<prefix>.json` and appends a row to `<prefix>.csv`, adding
    /// the header when the CSV is new.
    pub fn save(&self, prefix: &str) -> Result<()> {
        let json = format!("{prefix}.json");
        std::fs::write(&json, self.to_json()).with_context(|| format!("writing {json}"))?;
        let csv_path = format!("{prefix}.csv");
        let fresh = !Path::new(&csv_path).exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)
            .with_context(|| format!("opening {csv_path}"))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(self)?;
        w.flush()?;
        Ok(())
    }
}

/// Training log as CSV text.
pub fn log_csv(log: &[LogEntry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "lr", "loss", "grad_norm", "metric", "global", "rotation", "alpha_g", "alpha_r", "val_accuracy"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in log {
        w.write_record([
            e.step.to_string(),
            e.lr.to_string(),
            e.loss.to_string(),
            e.grad_norm.to_string(),
            e.metric.to_string(),
            opt(e.global),
            opt(e.rotation),
            opt(e.alpha_g),
            opt(e.alpha_r),
            opt(e.val_accuracy),
        ])?;
    }
    let mut bytes = w.into_inner()?;
    bytes.flush()?;
    Ok(String::from_utf8(bytes)?)
}
