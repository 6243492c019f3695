//! Complexity report: attention multiply-accumulates, neck parameters and
//! measured forward time for every neck variant.

use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{ensure, Result};
use serde::Serialize;
use tsf_core::attention::{count_attention_macs, count_parameters, init_neck, neck_forward, NeckKind, NeckVariant};
use tsf_core::params::ParamStore;
use tsf_core::rng::Stream;
use tsf_core::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub heads: usize,
    pub macs: u128,
    pub parameters: usize,
    /// Median wall time of one forward pass, nanoseconds.
    pub median_ns: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub n: usize,
    pub runs: usize,
    pub warmup: usize,
    pub rows: Vec<BenchRow>,
    /// `macs(transformer) / macs(tsf)` as a reduced fraction.
    pub ratio_num: u128,
    pub ratio_den: u128,
    pub ratio: f64,
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn median_forward_ns(variant: &NeckVariant, store: &ParamStore, f: &Tensor, runs: usize, warmup: usize) -> Result<u128> {
    let once = || -> Result<u128> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(f.clone());
        let y = neck_forward(&mut tape, variant, &bound, x)?;
        std::hint::black_box(tape.value(y));
        Ok(start.elapsed().as_nanos())
    };
    for _ in 0..warmup {
        once()?;
    }
    let mut times = (0..runs.max(1)).map(|_| once()).collect::<Result<Vec<_>>>()?;
    times.sort_unstable();
    Ok(times[times.len() / 2])
}

/// Counts and times every variant at each head count in `heads`.
///
/// Fails if the transformer/tsf multiply-accumulate ratio differs from
/// `hw / n`, compared as integers.
pub fn complexity_report(h: usize, w: usize, c: usize, n: usize, heads: &[usize], runs: usize, warmup: usize) -> Result<ComplexityReport> {
    ensure!(h > 0 && w > 0 && c > 0 && n > 0, "report dimensions must be positive");
    let hw = (h * w) as u128;
    let t = count_attention_macs(NeckKind::Transformer, h, w, c, n, 1);
    let s = count_attention_macs(NeckKind::Tsf, h, w, c, n, 1);
    ensure!(t * n as u128 == s * hw, "MAC ratio {t}/{s} differs from hw/n = {hw}/{n}");
    let g = gcd(t, s);

    let f = {
        let mut rng = Stream::new(0, "bench/input");
        Tensor::new(&[1, c, h, w], (0..c * h * w).map(|_| rng.normal()).collect())?
    };
    let mut rows = Vec::new();
    for &hd in heads {
        for kind in NeckKind::ALL {
            let mut variant = NeckVariant::new(kind, c);
            variant.heads = hd;
            variant.n = n;
            variant.validate()?;
            let mut store = ParamStore::new();
            init_neck(&variant, &mut Stream::new(0, "bench/init"), &mut store)?;
            rows.push(BenchRow {
                variant: kind.to_string(),
                heads: hd,
                macs: count_attention_macs(kind, h, w, c, n, hd),
                parameters: count_parameters(&variant, &store),
                median_ns: median_forward_ns(&variant, &store, &f, runs, warmup)?,
            });
        }
    }
    Ok(ComplexityReport {
        h,
        w,
        c,
        n,
        runs,
        warmup,
        rows,
        ratio_num: t / g,
        ratio_den: s / g,
        ratio: t as f64 / s as f64,
    })
}

impl ComplexityReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "complexity at h={} w={} c={} n={}", self.h, self.w, self.c, self.n);
        let _ = writeln!(
            out,
            "transformer/tsf MAC ratio = {}/{} = {} (hw/n = {})",
            self.ratio_num,
            self.ratio_den,
            self.ratio,
            (self.h * self.w) as f64 / self.n as f64
        );
        let _ = writeln!(out, "wall time: median of {} runs after {} warmups", self.runs, self.warmup);
        let _ = writeln!(out, "{:<18} {:>5} {:>16} {:>12} {:>14}", "variant", "heads", "macs", "params", "median_us");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<18} {:>5} {:>16} {:>12} {:>14.1}",
                r.variant,
                r.heads,
                r.macs,
                r.parameters,
                r.median_ns as f64 / 1e3
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
