//! Quick built-in oracle and gradient checks for the `selftest` command.

use anyhow::{ensure, Result};
use tsf_core::attention::{self, count_attention_macs, count_parameters, init_neck, NeckKind, NeckVariant};
use tsf_core::data::{rotate_queries, sample_episode, synth_generate, GenConfig, MetricsRecord, Split};
use tsf_core::gradcheck::{check_gradients, DEFAULT_EPS};
use tsf_core::params::{Bound, ParamStore};
use tsf_core::patchproto::{metric_predict, ModelConfig, PatchProto};
use tsf_core::rng::Stream;
use tsf_core::{Tape, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Stream::new(seed, "selftest");
    Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.normal()).collect()).unwrap()
}

fn attention_oracle() -> Result<String> {
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::from_rows(&[&[1.0, 0.0]])?);
    let kv = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 3.0]])?);
    let a = attention::attention(&mut tape, q, kv, kv, 1, false)?;
    let got = tape.value(a).data().to_vec();
    let e = std::f64::consts::E;
    let (w0, w1) = (e / (e + 1.0), 1.0 / (e + 1.0));
    let want = [w0, 2.0 * w0 + 3.0 * w1];
    let err = got.iter().zip(want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
    ensure!(err < 1e-12, "attention off by {err:e}");
    Ok(format!("max error {err:.1e}"))
}

fn tsf_gradients() -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut variant = NeckVariant::new(NeckKind::Tsf, 4);
        variant.n = 3;
        let mut store = ParamStore::new();
        init_neck(&variant, &mut Stream::new(seed, "init"), &mut store)?;
        let names = store.names().to_vec();
        let mut inputs = vec![random(&[1, 4, 3, 3], seed)];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let project = random(&[1, 4, 3, 3], seed + 100);
        let report = check_gradients(
            |t, v| {
                let bound = Bound::from_parts(names.clone(), v[1..].to_vec());
                let y = attention::neck_forward(t, &variant, &bound, v[0])?;
                let p = t.constant(project.clone());
                let yp = t.mul(y, p)?;
                t.sum(yp)
            },
            &inputs,
            DEFAULT_EPS,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    ensure!(worst < 1e-4, "relative error {worst:e}");
    Ok(format!("max relative error {worst:.1e}"))
}

fn loss_gradients() -> Result<String> {
    let bundle = synth_generate(
        &GenConfig {
            base_classes: 5,
            val_classes: 0,
            images_per_class: 4,
            size: 8,
            ..GenConfig::default()
        },
        1,
    )?;
    let mut cfg = ModelConfig::new(8, vec![3, 4], NeckKind::Tsf, 5);
    cfg.neck.n = 3;
    let model = PatchProto::new(cfg, 1)?;
    let gi = model.global_index(&bundle)?;
    let e = sample_episode(&bundle, Split::Base, 2, 1, 1, &mut Stream::new(1, "selftest"))?;
    let e = rotate_queries(&e)?;
    let names = model.params.names().to_vec();
    let inputs: Vec<Tensor> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(
        |t, v| Ok(model.episode_loss(t, &Bound::from_parts(names.clone(), v.to_vec()), &e, &gi)?.total),
        &inputs,
        DEFAULT_EPS,
    )?;
    ensure!(report.max_rel_error < 1e-4, "relative error {:e}", report.max_rel_error);
    Ok(format!("{} scalars, max relative error {:.1e}", report.evaluated, report.max_rel_error))
}

fn mac_ratio() -> Result<String> {
    for hw in [4usize, 8, 16] {
        for n in [1usize, 5, 16] {
            let t = count_attention_macs(NeckKind::Transformer, hw, hw, 64, n, 1);
            let s = count_attention_macs(NeckKind::Tsf, hw, hw, 64, n, 1);
            ensure!(t * n as u128 == s * (hw * hw) as u128, "ratio at h=w={hw}, n={n}");
        }
    }
    Ok("transformer/tsf = hw/n on the 3x3 grid".into())
}

fn parameter_count() -> Result<String> {
    let variant = NeckVariant::new(NeckKind::Tsf, 640);
    let mut store = ParamStore::new();
    init_neck(&variant, &mut Stream::new(0, "init"), &mut store)?;
    let count = count_parameters(&variant, &store);
    ensure!(count == 826_240, "counted {count}");
    Ok(format!("{count} learnables"))
}

fn metric_closed_form() -> Result<String> {
    let token = |k: usize| (0..5).flat_map(|i| [if i == k { 1.0 } else { 0.0 }; 4]).collect::<Vec<f64>>();
    let q = Tensor::new(&[5, 2, 2], token(0))?;
    let protos = Tensor::new(&[5, 5, 2, 2], (0..5).flat_map(token).collect())?;
    let p = metric_predict(&q, &protos, 1.0)?;
    let e = std::f64::consts::E;
    let err = (p.data()[0] - e / (e + 4.0)).abs();
    ensure!(err < 1e-15, "p0 off by {err:e}");
    Ok(format!("p0 = {:.6}", p.data()[0]))
}

fn protocol_statistics() -> Result<String> {
    let m = MetricsRecord::from_accuracies(&[0.5, 0.7], "selftest")?;
    let want = 1.96 * 0.02f64.sqrt() / 2f64.sqrt();
    ensure!((m.ci95 - want).abs() < 1e-12, "ci95 {} vs {want}", m.ci95);
    let bundle = synth_generate(&GenConfig { val_classes: 0, images_per_class: 6, size: 8, ..GenConfig::default() }, 2)?;
    let e = sample_episode(&bundle, Split::Novel, 5, 1, 2, &mut Stream::new(2, "selftest"))?;
    let r = rotate_queries(&e)?;
    ensure!(r.query.shape()[0] == 4 * e.query.shape()[0], "rotated query count");
    for turn in 0..4 {
        ensure!(r.rotation_labels.iter().filter(|&&l| l == turn).count() == e.query.shape()[0], "unbalanced rotations");
    }
    Ok(format!("ci95 = {:.6}, {} rotated queries", m.ci95, r.query.shape()[0]))
}

pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<String>); 7] = [
        ("attention worked example", attention_oracle),
        ("tsf neck gradients", tsf_gradients),
        ("multi-task loss gradients", loss_gradients),
        ("attention MAC ratio", mac_ratio),
        ("tsf parameter count", parameter_count),
        ("metric closed form", metric_closed_form),
        ("protocol statistics", protocol_statistics),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult { name, passed: true, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("{e:#}"),
            },
        })
        .collect()
}
