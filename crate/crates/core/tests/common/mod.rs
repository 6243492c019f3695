//! Random inputs and explicit-loop oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use tsf_core::attention::{init_neck, neck_forward, FfnBlock, NeckKind, NeckVariant};
use tsf_core::data::{synth_generate, DatasetBundle, Episode, GenConfig};
use tsf_core::params::ParamStore;
use tsf_core::patchproto::{ModelConfig, PatchProto};
use tsf_core::rng::Stream;
use tsf_core::{Result, Tape, Tensor, Var};

pub fn normal(shape: &[usize], seed: u64, label: &str) -> Tensor {
    let mut rng = Stream::new(seed, label);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64, label: &str) -> Tensor {
    let mut rng = Stream::new(seed, label);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

/// Normal draws pushed at least `gap` away from zero, for kinked ops.
pub fn away_from_zero(shape: &[usize], gap: f64, seed: u64, label: &str) -> Tensor {
    let mut t = normal(shape, seed, label);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = if *v < 0.0 { -gap } else { gap } * 2.0;
        }
    }
    t
}

/// `sum(x * r)` for a fixed random `r`, so every output element matters.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let r = normal(tape.shape(x), seed, "projection");
    let r = tape.constant(r);
    let p = tape.mul(x, r)?;
    tape.sum(p)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- dense oracles -------------------------------------------------------

/// Row-major `[m, k] x [k, p]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * p + j];
            }
            c[i * p + j] = s;
        }
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

/// `softmax(Q Kᵀ) V` for one head.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], a: usize, b: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a * c];
    for i in 0..a {
        let logits: Vec<f64> = (0..b)
            .map(|j| (0..c).map(|t| q[i * c + t] * k[j * c + t]).sum())
            .collect();
        let w = softmax_rows(&logits, b);
        for j in 0..b {
            for t in 0..c {
                out[i * c + t] += w[j] * v[j * c + t];
            }
        }
    }
    out
}

/// 3x3 convolution with zero padding 1 over `[B, Cin, H, W]`.
pub fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let s = x.shape();
    let (bn, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let cout = w.shape()[0];
    let mut out = vec![0.0; bn * cout * h * wd];
    for n in 0..bn {
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.at(&[co, ci, ky, kx]) * x.at(&[n, ci, sy as usize, sx as usize]);
                            }
                        }
                    }
                    out[((n * cout + co) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn layer_norm_row(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

/// Post-norm feed-forward block on one token.
pub fn ffn_token(x: &[f64], p: &FfnBlock) -> Vec<f64> {
    let c = x.len();
    let hidden = p.b1.len();
    let z: Vec<f64> = layer_norm_row(x)
        .iter()
        .enumerate()
        .map(|(i, v)| v * p.norm1_gain.data()[i] + p.norm1_bias.data()[i])
        .collect();
    let mut hdn = vec![0.0; hidden];
    for j in 0..hidden {
        let mut s = p.b1.data()[j];
        for i in 0..c {
            s += z[i] * p.w1.at(&[i, j]);
        }
        hdn[j] = s.max(0.0);
    }
    let mut y = vec![0.0; c];
    for i in 0..c {
        let mut s = p.b2.data()[i];
        for j in 0..hidden {
            s += hdn[j] * p.w2.at(&[j, i]);
        }
        y[i] = z[i] + s;
    }
    layer_norm_row(&y)
        .iter()
        .enumerate()
        .map(|(i, v)| v * p.norm2_gain.data()[i] + p.norm2_bias.data()[i])
        .collect()
}

/// `[c, h, w]` to `hw` tokens of length `c`.
pub fn tokens(f: &Tensor) -> Vec<Vec<f64>> {
    let s = f.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    (0..h * w)
        .map(|m| (0..c).map(|ch| f.data()[ch * h * w + m]).collect())
        .collect()
}

/// Tokens back to `[c, h, w]` data.
pub fn untokens(t: &[Vec<f64>], c: usize) -> Vec<f64> {
    let hw = t.len();
    let mut out = vec![0.0; c * hw];
    for (m, tok) in t.iter().enumerate() {
        for ch in 0..c {
            out[ch * hw + m] = tok[ch];
        }
    }
    out
}

/// Affine block whose every parameter is random, so the oracle exercises
/// gains and biases too.
pub fn random_ffn(c: usize, hidden: usize, seed: u64) -> FfnBlock {
    FfnBlock {
        w1: normal(&[c, hidden], seed, "w1"),
        b1: normal(&[hidden], seed, "b1"),
        w2: normal(&[hidden, c], seed, "w2"),
        b2: normal(&[c], seed, "b2"),
        norm1_gain: uniform(&[c], 0.5, 1.5, seed, "g1"),
        norm1_bias: normal(&[c], seed, "n1"),
        norm2_gain: uniform(&[c], 0.5, 1.5, seed, "g2"),
        norm2_bias: normal(&[c], seed, "n2"),
    }
}

/// `FFN(f_m + sum_i softmax_i(f_m . θ_i) θ_i)` at every position.
pub fn tsf(f: &Tensor, theta: &Tensor, ffn: Option<&FfnBlock>) -> Vec<f64> {
    let c = f.shape()[0];
    let n = theta.shape()[0];
    let out: Vec<Vec<f64>> = tokens(f)
        .iter()
        .map(|x| {
            let a = attention(x, theta.data(), theta.data(), 1, n, c);
            let pre: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
            match ffn {
                Some(p) => ffn_token(&pre, p),
                None => pre,
            }
        })
        .collect();
    untokens(&out, c)
}

/// `FFN(f + softmax(f fᵀ) f)`.
pub fn self_attention(f: &Tensor, ffn: Option<&FfnBlock>) -> Vec<f64> {
    let c = f.shape()[0];
    let toks = tokens(f);
    let flat: Vec<f64> = toks.iter().flatten().copied().collect();
    let hw = toks.len();
    let a = attention(&flat, &flat, &flat, hw, hw, c);
    let out: Vec<Vec<f64>> = toks
        .iter()
        .enumerate()
        .map(|(m, x)| {
            let pre: Vec<f64> = x.iter().zip(&a[m * c..(m + 1) * c]).map(|(u, v)| u + v).collect();
            match ffn {
                Some(p) => ffn_token(&pre, p),
                None => pre,
            }
        })
        .collect();
    untokens(&out, c)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    dot / (na * nb)
}

/// Spatial mean of a `[c, h, w]` map.
pub fn gap(f: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|ch| f[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

/// Per-position `[hw, N]` metric probabilities of a `[c, h, w]` query.
pub fn metric_probs(q: &Tensor, protos: &Tensor, temperature: f64) -> Vec<f64> {
    let c = q.shape()[0];
    let hw = q.shape()[1] * q.shape()[2];
    let n = protos.shape()[0];
    let pooled: Vec<Vec<f64>> = (0..n)
        .map(|k| gap(&protos.data()[k * c * hw..(k + 1) * c * hw], c, hw))
        .collect();
    let mut out = Vec::new();
    for tok in tokens(q) {
        let logits: Vec<f64> = pooled.iter().map(|p| temperature * cosine(&tok, p)).collect();
        out.extend(softmax_rows(&logits, n));
    }
    out
}

/// `sum -log softmax(logits)[label]` over rows.
pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let p = softmax_rows(logits, k);
    labels.iter().enumerate().map(|(r, &l)| -p[r * k + l].ln()).sum()
}

/// `0.5 L_M + sum_j (λ + w_j) L_j - ln(λ + w_j)`, `w_j = 1/(2 α_j²)`.
pub fn multitask(lm: f64, aux: &[(f64, f64)], lambda: f64) -> f64 {
    let mut total = 0.5 * lm;
    for &(l, alpha) in aux {
        let coeff = lambda + 1.0 / (2.0 * alpha * alpha);
        total += coeff * l - coeff.ln();
    }
    total
}

pub fn random_neck(variant: &NeckVariant, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_neck(variant, &mut Stream::new(seed, "init"), &mut store).unwrap();
    let names: Vec<String> = store.names().to_vec();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        let mut t = normal(&shape, seed, &name);
        if name.ends_with("gain") {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0 + 0.3 * *v);
        }
        store.replace(&name, t).unwrap();
    }
    store
}

pub fn neck_value(variant: &NeckVariant, store: &ParamStore, f: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let fv = tape.constant(f.clone());
    let y = neck_forward(&mut tape, variant, &bound, fv).unwrap();
    tape.value(y).clone()
}

pub fn ffn_of(store: &ParamStore) -> FfnBlock {
    let g = |s: &str| store.get(&format!("neck.ffn.{s}")).unwrap().clone();
    FfnBlock {
        w1: g("w1"),
        b1: g("b1"),
        w2: g("w2"),
        b2: g("b2"),
        norm1_gain: g("norm1.gain"),
        norm1_bias: g("norm1.bias"),
        norm2_gain: g("norm2.gain"),
        norm2_bias: g("norm2.bias"),
    }
}

// ---- model-level ---------------------------------------------------------

pub fn tiny_bundle(channels: usize, size: usize, seed: u64) -> DatasetBundle {
    let cfg = GenConfig {
        base_classes: 5,
        val_classes: 0,
        novel_classes: 5,
        images_per_class: 8,
        channels,
        size,
        ..GenConfig::default()
    };
    synth_generate(&cfg, seed).unwrap()
}

pub fn micro_model(neck: NeckKind, rotation: bool) -> PatchProto {
    let mut cfg = ModelConfig::new(8, vec![3, 4], neck, 5);
    cfg.use_rotation = rotation;
    cfg.temperature = 2.0;
    cfg.neck.n = 3;
    PatchProto::new(cfg, 5).unwrap()
}

/// Identity backbone over `channels x size x size` images.
pub fn rig(neck: NeckKind, channels: usize, size: usize, rotation: bool) -> PatchProto {
    let mut cfg = ModelConfig::new(size, vec![], neck, 5);
    cfg.in_channels = channels;
    cfg.neck.c = channels;
    cfg.neck.n = 3;
    cfg.use_rotation = rotation;
    cfg.temperature = 1.7;
    cfg.lambda = 0.3;
    let mut m = PatchProto::new(cfg, 9).unwrap();
    // Non-trivial loss weights.
    *m.params.get_mut("loss.alpha_g").unwrap() = Tensor::scalar(0.8);
    if rotation {
        *m.params.get_mut("loss.alpha_r").unwrap() = Tensor::scalar(1.3);
    }
    m
}

pub fn rig_features(model: &PatchProto, images: &Tensor) -> Vec<Tensor> {
    let p = &model.params;
    (0..images.shape()[0])
        .map(|i| {
            let img = images.slab(i);
            match model.config.neck.kind {
                NeckKind::None => img,
                NeckKind::Tsf => {
                    let ffn = ffn_of(p);
                    let out = tsf(&img, p.get("neck.theta").unwrap(), Some(&ffn));
                    Tensor::new(img.shape(), out).unwrap()
                }
                _ => unimplemented!(),
            }
        })
        .collect()
}

/// Explicit-loop total loss of one (possibly rotated) episode.
pub fn loss_oracle(model: &PatchProto, episode: &Episode, gi: &BTreeMap<usize, usize>) -> f64 {
    let cfg = &model.config;
    let support = rig_features(model, &episode.support);
    let nq = if cfg.use_rotation { episode.query.shape()[0] } else { episode.base_queries() };
    let queries = rig_features(model, &episode.query);
    let c = support[0].shape()[0];
    let per = support[0].len();
    let hw = per / c;
    let mut protos = vec![0.0; episode.n_way * per];
    for (s, &l) in support.iter().zip(&episode.support_labels) {
        for j in 0..per {
            protos[l * per + j] += s.data()[j] / episode.k_shot as f64;
        }
    }
    let protos = Tensor::new(&[episode.n_way, c, hw, 1], protos).unwrap();
    let head = |q: &Tensor, w: &Tensor, b: &Tensor, label: usize| -> f64 {
        let k = b.len();
        let logits: Vec<f64> = tokens(q)
            .iter()
            .flat_map(|t| (0..k).map(|j| b.data()[j] + (0..c).map(|i| t[i] * w.at(&[i, j])).sum::<f64>()).collect::<Vec<_>>())
            .collect();
        cross_entropy(&logits, k, &vec![label; hw])
    };
    let (mut lm, mut lg, mut lr) = (0.0, 0.0, 0.0);
    for i in 0..nq {
        let q = &queries[i];
        let probs = metric_probs(q, &protos, cfg.temperature);
        lm -= probs.chunks(episode.n_way).map(|row| row[episode.query_labels[i]].ln()).sum::<f64>();
        let p = &model.params;
        lg += head(q, p.get("head.global.weight").unwrap(), p.get("head.global.bias").unwrap(), gi[&episode.query_global[i]]);
        if cfg.use_rotation {
            lr += head(q, p.get("head.rotation.weight").unwrap(), p.get("head.rotation.bias").unwrap(), episode.rotation_labels[i]);
        }
    }
    let nq = nq as f64;
    let (ag, ar) = model.alphas();
    let mut aux = vec![(lg / nq, ag.unwrap())];
    if cfg.use_rotation {
        aux.push((lr / nq, ar.unwrap()));
    }
    multitask(lm / nq, &aux, cfg.lambda)
}

pub fn tape_loss(model: &PatchProto, episode: &Episode, gi: &BTreeMap<usize, usize>) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let parts = model.episode_loss(&mut tape, &bound, episode, gi).unwrap();
    tape.value(parts.total).data()[0]
}

