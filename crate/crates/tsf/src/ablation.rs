//! Ablation grids: one axis of the run configuration swept over a list of
//! values, each cell trained and evaluated for every seed.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{ensure, Result};
use log::{info, warn};
use serde::Serialize;
use tsf_core::data::{DatasetBundle, MetricsRecord};

use crate::config::{Axis, RunConfig};
use crate::pipeline::{dataset_hash, evaluate_parallel, train_run};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub axis: Axis,
    pub values: Vec<String>,
    pub base: RunConfig,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            axis: cfg.axis,
            values: cfg.values.0.clone(),
            base: cfg.clone(),
            seeds: cfg.seeds.0.clone(),
        }
    }

    /// Configuration of one cell: the base with the axis key replaced.
    pub fn cell_config(&self, value: &str, seed: u64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        cfg.set(self.axis.key(), value)?;
        cfg.seed = seed;
        cfg.threads = 1;
        Ok(cfg)
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub axis: String,
    pub value: String,
    /// Mean over every episode of every seed (equal to the seed average).
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub episodes: usize,
    /// Per-seed means, `;`-separated, in seed order.
    pub seed_means: String,
    pub dataset_hash: String,
    pub config_hash: String,
    /// `ok`, or the first error message.
    pub status: String,
}

impl CellResult {
    pub fn seed_accuracies(&self) -> Vec<f64> {
        self.seed_means.split(';').filter_map(|s| s.parse().ok()).collect()
    }
}

fn run_job(grid: &AblationGrid, bundle: &DatasetBundle, value: &str, seed: u64) -> Result<Vec<f64>> {
    let cfg = grid.cell_config(value, seed)?;
    let run = train_run(&cfg, bundle)?;
    evaluate_parallel(&run.checkpoint.model, bundle, &cfg.protocol(), cfg.seed, 1)
}

/// Trains and evaluates every (value, seed) job on up to `threads` workers.
/// Each job owns its model and random streams, so the table is identical
/// for any thread count. A failing cell is reported in its row and the grid
/// continues.
pub fn run_ablation(grid: &AblationGrid, bundle: &DatasetBundle, threads: usize) -> Result<Vec<CellResult>> {
    ensure!(!grid.values.is_empty() && !grid.seeds.is_empty(), "ablation grid needs values and seeds");
    for v in &grid.values {
        grid.cell_config(v, 0)?;
    }
    let jobs: Vec<(usize, usize)> = (0..grid.values.len())
        .flat_map(|v| (0..grid.seeds.len()).map(move |s| (v, s)))
        .collect();
    let results: Vec<Mutex<Option<Result<Vec<f64>, String>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(v, s)) = jobs.get(j) else { break };
        let (value, seed) = (&grid.values[v], grid.seeds[s]);
        let out = run_job(grid, bundle, value, seed).map_err(|e| format!("{e:#}"));
        match &out {
            Ok(acc) => info!("{}={value} seed {seed}: {:.4}", grid.axis, acc.iter().sum::<f64>() / acc.len() as f64),
            Err(e) => warn!("{}={value} seed {seed} failed: {e}", grid.axis),
        }
        *results[j].lock().unwrap() = Some(out);
    };
    std::thread::scope(|s| {
        for _ in 1..threads.max(1).min(jobs.len()) {
            s.spawn(worker);
        }
        worker();
    });

    let data_hash = dataset_hash(bundle);
    let mut rows = Vec::new();
    for (v, value) in grid.values.iter().enumerate() {
        let cell = grid.cell_config(value, grid.seeds[0])?;
        let mut pooled = Vec::new();
        let mut means = Vec::new();
        let mut status = String::from("ok");
        for s in 0..grid.seeds.len() {
            match results[v * grid.seeds.len() + s].lock().unwrap().take().expect("every job ran") {
                Ok(acc) => {
                    means.push(acc.iter().sum::<f64>() / acc.len() as f64);
                    pooled.extend(acc);
                }
                Err(e) if status == "ok" => status = format!("seed {}: {e}", grid.seeds[s]),
                Err(_) => {}
            }
        }
        let mut fingerprint_cfg = cell.clone();
        fingerprint_cfg.seed = 0;
        let record = if status == "ok" {
            Some(MetricsRecord::from_accuracies(&pooled, &fingerprint_cfg.fingerprint())?)
        } else {
            None
        };
        rows.push(CellResult {
            axis: grid.axis.to_string(),
            value: value.clone(),
            mean_accuracy: record.as_ref().map_or(f64::NAN, |r| r.mean_accuracy),
            ci95: record.as_ref().map_or(f64::NAN, |r| r.ci95),
            episodes: pooled.len(),
            seed_means: means.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(";"),
            dataset_hash: data_hash.clone(),
            config_hash: fingerprint_cfg.fingerprint(),
            status,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}
