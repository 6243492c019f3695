//! PatchProto: backbone, neck, patch-wise metric classifier, auxiliary
//! global and rotation heads, the multi-task loss, episodic training and
//! inductive inference.
//!
//! Every query feature map is classified position by position. For the
//! metric head, position `m` of a query is compared by cosine similarity
//! with the spatially pooled prototype of each way; the auxiliary heads are
//! per-position linear classifiers over base classes and over the four
//! rotations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, NeckKind, NeckVariant};
use crate::data::{rotate_queries, sample_episode, DatasetBundle, Episode, MetricsRecord, Split};
use crate::error::{shape_err, Error, Result};
use crate::params::{gaussian, Bound, ParamStore};
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ROTATIONS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each conv block (3x3 conv, leaky ReLU, 2x2 max
    /// pool).
    /// An empty list makes the backbone the identity, which is only meant
    /// for test rigs.
    pub backbone: Vec<usize>,
    /// Negative slope of the backbone activation; 0 gives a plain ReLU.
    pub leak: f64,
    pub neck: NeckVariant,
    /// Number of base classes the global head predicts.
    pub global_classes: usize,
    pub use_global: bool,
    pub use_rotation: bool,
    pub temperature: f64,
    pub lambda: f64,
    pub alpha_init: f64,
}

impl ModelConfig {
    /// Conv4-style defaults for `size x size` single-channel inputs.
    pub fn new(image_size: usize, backbone: Vec<usize>, neck: NeckKind, global_classes: usize) -> Self {
        let c = backbone.last().copied().unwrap_or(1);
        Self {
            in_channels: 1,
            image_size,
            backbone,
            leak: 0.1,
            neck: NeckVariant::new(neck, c),
            global_classes,
            use_global: true,
            use_rotation: true,
            temperature: 1.0,
            lambda: 0.5,
            alpha_init: 1.0,
        }
    }

    /// `(c, h, w)` of the embedding.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let c = self.backbone.last().copied().unwrap_or(self.in_channels);
        let hw = self.image_size >> self.backbone.len();
        (c, hw, hw)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.len() > 4 || self.backbone.contains(&0) {
            return Err(Error::Config(format!(
                "backbone must have at most 4 blocks with positive widths, got {:?}",
                self.backbone
            )));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(Error::Config(format!("activation slope {} outside [0, 1)", self.leak)));
        }
        if self.in_channels == 0 || self.image_size == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        let (c, h, w) = self.feature_shape();
        if h < 2 || w < 2 || self.image_size % (1 << self.backbone.len()) != 0 {
            return Err(Error::Config(format!(
                "{} blocks collapse a {}px image to {h}x{w}; patch-wise losses need at least 2x2",
                self.backbone.len(),
                self.image_size
            )));
        }
        if self.neck.c != c {
            return Err(Error::Config(format!(
                "neck expects {} channels but the backbone produces {c}",
                self.neck.c
            )));
        }
        self.neck.validate()?;
        if self.use_global && self.global_classes == 0 {
            return Err(Error::Config("global head needs at least one class".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.alpha_init > 0.0) || !self.alpha_init.is_finite() {
            return Err(Error::Config(format!("alpha init must be positive, got {}", self.alpha_init)));
        }
        Ok(())
    }
}

/// The full network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchProto {
    pub config: ModelConfig,
    pub params: ParamStore,
}

const ALPHA_G: &str = "loss.alpha_g";
const ALPHA_R: &str = "loss.alpha_r";

impl PatchProto {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::new(seed, "model/init");
        let mut params = ParamStore::new();
        let mut cin = config.in_channels;
        for (i, &cout) in config.backbone.iter().enumerate() {
            let std = libm::sqrt(2.0 / (9 * cin) as f64);
            params.insert(&format!("backbone.{i}.weight"), gaussian(&[cout, cin, 3, 3], std, &mut rng))?;
            params.insert(&format!("backbone.{i}.bias"), Tensor::zeros(&[cout]))?;
            cin = cout;
        }
        attention::init_neck(&config.neck, &mut rng, &mut params)?;
        let c = config.neck.c;
        let std = 1.0 / libm::sqrt(c as f64);
        if config.use_global {
            params.insert("head.global.weight", gaussian(&[c, config.global_classes], std, &mut rng))?;
            params.insert("head.global.bias", Tensor::zeros(&[config.global_classes]))?;
        }
        if config.use_rotation {
            params.insert("head.rotation.weight", gaussian(&[c, ROTATIONS], std, &mut rng))?;
            params.insert("head.rotation.bias", Tensor::zeros(&[ROTATIONS]))?;
        }
        if config.use_global {
            params.insert(ALPHA_G, Tensor::scalar(config.alpha_init))?;
        }
        if config.use_rotation {
            params.insert(ALPHA_R, Tensor::scalar(config.alpha_init))?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking that names and
    /// shapes are exactly those the configuration implies.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config, 0)?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(Error::Config(format!(
                "parameters do not match the configuration: expected {expected:?}, got {got:?}"
            )));
        }
        Ok(Self {
            config: template.config,
            params,
        })
    }

    pub fn feature_shape(&self) -> (usize, usize, usize) {
        self.config.feature_shape()
    }

    pub fn neck_parameters(&self) -> usize {
        attention::count_parameters(&self.config.neck, &self.params)
    }

    /// Backbone only, on the tape.
    pub fn backbone_on(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let mut x = images;
        for i in 0..self.config.backbone.len() {
            let w = bound.get(&format!("backbone.{i}.weight"))?;
            let b = bound.get(&format!("backbone.{i}.bias"))?;
            x = tape.conv2d(x, w, b)?;
            x = tape.leaky_relu(x, self.config.leak)?;
            x = tape.max_pool2(x)?;
        }
        Ok(x)
    }

    /// Backbone then neck: `[B, ch, H, W] -> [B, c, h, w]`.
    pub fn embed_on(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images);
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != self.config.image_size || s[3] != self.config.image_size {
            return Err(shape_err(
                "embed",
                format!(
                    "images {s:?} for a {}x{}x{} model",
                    self.config.in_channels, self.config.image_size, self.config.image_size
                ),
            ));
        }
        let f = self.backbone_on(tape, bound, images)?;
        attention::neck_forward(tape, &self.config.neck, bound, f)
    }

    /// Inference-only embedding of an image batch.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let e = self.embed_on(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }

    pub fn backbone_features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let e = self.backbone_on(&mut tape, &bound, x)?;
        Ok(tape.value(e).clone())
    }

    /// Per-query way predictions for an un-rotated episode.
    pub fn infer(&self, episode: &Episode) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let (support, query) = self.embed_episode(&mut tape, &bound, episode, false)?;
        let protos = prototypes_on(&mut tape, support, &episode.support_labels, episode.n_way)?;
        let (_, h, w) = self.feature_shape();
        let tokens = query_tokens(&mut tape, query)?;
        let logits = metric_logits_on(&mut tape, tokens, protos, self.config.temperature)?;
        let logp = tape.log_softmax(logits)?;
        Ok(aggregate_predictions(tape.value(logp), h * w, episode.n_way))
    }

    /// Embeds support and query images in one batch and splits the result.
    /// With `rotated`, all queries (including rotated copies) are used;
    /// otherwise only the first `base_queries`.
    fn embed_episode(&self, tape: &mut Tape, bound: &Bound, episode: &Episode, rotated: bool) -> Result<(Var, Var)> {
        let ns = episode.support.shape()[0];
        let nq = if rotated {
            episode.query.shape()[0]
        } else {
            episode.base_queries()
        };
        if nq == 0 {
            return Err(Error::Contract("episode has no queries".into()));
        }
        let per = episode.support.len() / ns;
        let mut data = Vec::with_capacity((ns + nq) * per);
        data.extend_from_slice(episode.support.data());
        data.extend_from_slice(&episode.query.data()[..nq * per]);
        let mut shape = episode.support.shape().to_vec();
        shape[0] = ns + nq;
        let batch = tape.constant(Tensor::new(&shape, data)?);
        let e = self.embed_on(tape, bound, batch)?;
        let support = tape.slice(e, 0, 0, ns)?;
        let query = tape.slice(e, 0, ns, nq)?;
        Ok((support, query))
    }

    /// Multi-task loss of one training episode. The episode must already be
    /// rotated when the rotation head is enabled; with it disabled the
    /// rotation labels are never read.
    pub fn episode_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        episode: &Episode,
        global_index: &BTreeMap<usize, usize>,
    ) -> Result<LossParts> {
        let cfg = &self.config;
        if cfg.use_rotation && episode.rotation_labels.len() != episode.query_labels.len() {
            return Err(Error::Contract("rotation head enabled but the episode is not rotated".into()));
        }
        let (support, query) = self.embed_episode(tape, bound, episode, cfg.use_rotation)?;
        let nq = tape.shape(query)[0];
        let (_, h, w) = self.feature_shape();
        let hw = h * w;
        let per_query = 1.0 / nq as f64;

        let protos = prototypes_on(tape, support, &episode.support_labels, episode.n_way)?;
        let tokens = query_tokens(tape, query)?;
        let logits = metric_logits_on(tape, tokens, protos, cfg.temperature)?;
        let metric = tape.cross_entropy(logits, &per_position(&episode.query_labels[..nq], hw))?;
        let metric = tape.scale(metric, per_query)?;

        let global = if cfg.use_global {
            let labels: Vec<usize> = episode.query_global[..nq]
                .iter()
                .map(|c| {
                    global_index
                        .get(c)
                        .copied()
                        .ok_or_else(|| Error::Contract(format!("class {c} has no global-head index")))
                })
                .collect::<Result<_>>()?;
            let l = patch_ce_loss(
                tape,
                tokens,
                bound.get("head.global.weight")?,
                bound.get("head.global.bias")?,
                &labels,
                hw,
            )?;
            Some(tape.scale(l, per_query)?)
        } else {
            None
        };
        let rotation = if cfg.use_rotation {
            let l = patch_ce_loss(
                tape,
                tokens,
                bound.get("head.rotation.weight")?,
                bound.get("head.rotation.bias")?,
                &episode.rotation_labels[..nq],
                hw,
            )?;
            Some(tape.scale(l, per_query)?)
        } else {
            None
        };
        let aux_g = match global {
            Some(l) => Some((l, bound.get(ALPHA_G)?)),
            None => None,
        };
        let aux_r = match rotation {
            Some(l) => Some((l, bound.get(ALPHA_R)?)),
            None => None,
        };
        let total = multitask_loss(tape, metric, aux_g, aux_r, cfg.lambda)?;
        Ok(LossParts {
            total,
            metric,
            global,
            rotation,
        })
    }

    /// Indexes base classes for the global head: the `i`-th smallest base
    /// class id maps to output `i`.
    pub fn global_index(&self, bundle: &DatasetBundle) -> Result<BTreeMap<usize, usize>> {
        let classes = bundle.classes(Split::Base);
        if self.config.use_global && classes.len() != self.config.global_classes {
            return Err(Error::Config(format!(
                "global head has {} outputs but the base split has {} classes",
                self.config.global_classes,
                classes.len()
            )));
        }
        Ok(classes.into_iter().enumerate().map(|(i, c)| (c, i)).collect())
    }

    pub fn alphas(&self) -> (Option<f64>, Option<f64>) {
        let get = |n: &str| self.params.get(n).map(|t| t.data()[0]);
        (get(ALPHA_G), get(ALPHA_R))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub metric: Var,
    pub global: Option<Var>,
    pub rotation: Option<Var>,
}

fn per_position(labels: &[usize], hw: usize) -> Vec<usize> {
    labels.iter().flat_map(|&l| core::iter::repeat_n(l, hw)).collect()
}

/// `[Q, c, h, w] -> [Q*h*w, c]`, query-major.
fn query_tokens(tape: &mut Tape, query: Var) -> Result<Var> {
    let s = tape.shape(query).to_vec();
    let t = attention::to_tokens(tape, query)?;
    tape.reshape(t, &[s[0] * s[2] * s[3], s[1]])
}

/// Way-wise means of `[N*M, c, h, w]` support embeddings, as `[N, c, h, w]`.
pub fn prototypes_on(tape: &mut Tape, support: Var, labels: &[usize], n_way: usize) -> Result<Var> {
    let s = tape.shape(support).to_vec();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(shape_err("prototypes", format!("support {s:?} with {} labels", labels.len())));
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Contract(format!("support label {l} out of range for {n_way} ways")));
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("way {empty} has no support examples")));
    }
    let mut avg = Tensor::zeros(&[n_way, labels.len()]);
    for (i, &l) in labels.iter().enumerate() {
        avg.set(&[l, i], 1.0 / counts[l] as f64);
    }
    let avg = tape.constant(avg);
    let flat = tape.reshape(support, &[s[0], s[1] * s[2] * s[3]])?;
    let mean = tape.matmul(avg, flat)?;
    tape.reshape(mean, &[n_way, s[1], s[2], s[3]])
}

/// Class features `P^k`: way-wise arithmetic means of support embeddings.
pub fn build_prototypes(support: &Tensor, labels: &[usize], n_way: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(support.clone());
    let p = prototypes_on(&mut tape, s, labels, n_way)?;
    Ok(tape.value(p).clone())
}

/// `temperature * cos(token, GAP(P^k))` for `[R, c]` tokens against
/// `[N, c, h, w]` prototypes, as `[R, N]` logits.
pub fn metric_logits_on(tape: &mut Tape, tokens: Var, protos: Var, temperature: f64) -> Result<Var> {
    let pooled = tape.global_avg_pool(protos)?;
    if tape.shape(pooled)[1] != tape.shape(tokens)[1] {
        return Err(shape_err(
            "metric_predict",
            format!("tokens {:?} against prototypes {:?}", tape.shape(tokens), tape.shape(protos)),
        ));
    }
    let pn = tape.normalize_l2(pooled)?;
    let qn = tape.normalize_l2(tokens)?;
    let pt = tape.transpose(pn)?;
    let cos = tape.matmul(qn, pt)?;
    tape.scale(cos, temperature)
}

/// Per-position class probabilities `[hw, N]` of one `[c, h, w]` query
/// feature map.
pub fn metric_predict(qfeat: &Tensor, protos: &Tensor, temperature: f64) -> Result<Tensor> {
    if qfeat.rank() != 3 || protos.rank() != 4 || protos.shape()[1..] != *qfeat.shape() {
        return Err(shape_err(
            "metric_predict",
            format!("query {:?} against prototypes {:?}", qfeat.shape(), protos.shape()),
        ));
    }
    let mut tape = Tape::new();
    let s = qfeat.shape().to_vec();
    let q = tape.constant(qfeat.clone().reshape(&[1, s[0], s[1], s[2]])?);
    let p = tape.constant(protos.clone());
    let tokens = query_tokens(&mut tape, q)?;
    let logits = metric_logits_on(&mut tape, tokens, p, temperature)?;
    let probs = tape.softmax(logits)?;
    Ok(tape.value(probs).clone())
}

/// `-sum_m log p(y = label | Q_m)` over the rows of `[hw, N]` probabilities.
pub fn metric_loss(predictions: &Tensor, label: usize) -> Result<f64> {
    if predictions.rank() != 2 {
        return Err(shape_err("metric_loss", format!("predictions {:?}", predictions.shape())));
    }
    let n = predictions.shape()[1];
    if label >= n {
        return Err(Error::Contract(format!("label {label} out of range for {n} ways")));
    }
    Ok(predictions
        .data()
        .chunks_exact(n)
        .map(|row| -libm::log(row[label]))
        .sum())
}

/// Patch-wise cross-entropy of a per-position linear head: `[Q*hw, c]`
/// tokens, `[c, K]` weight, `[K]` bias, one label per query (applied to all
/// `hw` of its positions). Summed over positions and queries.
pub fn patch_ce_loss(tape: &mut Tape, tokens: Var, weight: Var, bias: Var, labels: &[usize], hw: usize) -> Result<Var> {
    let k = tape.shape(weight)[1];
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    if tape.shape(tokens)[0] != labels.len() * hw {
        return Err(shape_err(
            "patch_ce_loss",
            format!("{:?} tokens for {} queries of {hw} positions", tape.shape(tokens), labels.len()),
        ));
    }
    let logits = tape.matmul(tokens, weight)?;
    let logits = tape.add_row(logits, bias)?;
    tape.cross_entropy(logits, &per_position(labels, hw))
}

/// `w = 1 / (2 alpha^2)` on the tape.
fn task_weight(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let sq = tape.mul(alpha, alpha)?;
    let twice = tape.scale(sq, 2.0)?;
    tape.recip(twice)
}

/// `0.5 L_M + sum_j [(lambda + w_j) L_j + log(1 / (lambda + w_j))]` over
/// the enabled auxiliary tasks, each given as `(loss, alpha)`.
pub fn multitask_loss(
    tape: &mut Tape,
    metric: Var,
    global: Option<(Var, Var)>,
    rotation: Option<(Var, Var)>,
    lambda: f64,
) -> Result<Var> {
    let mut total = tape.scale(metric, 0.5)?;
    for (loss, alpha) in [global, rotation].into_iter().flatten() {
        let w = task_weight(tape, alpha)?;
        let coef = tape.add_scalar(w, lambda)?;
        if !(tape.value(coef).data()[0] > 0.0) {
            return Err(Error::Contract(format!(
                "task coefficient lambda + w = {} must be positive",
                tape.value(coef).data()[0]
            )));
        }
        let weighted = tape.mul(coef, loss)?;
        let log_coef = tape.ln(coef)?;
        let term = tape.sub(weighted, log_coef)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Argmax over ways of the position-summed log-probabilities, per query.
/// `logp` is `[Q*hw, N]`. Ties go to the lowest way index.
pub fn aggregate_predictions(logp: &Tensor, hw: usize, n_way: usize) -> Vec<usize> {
    logp.data()
        .chunks_exact(hw * n_way)
        .map(|q| {
            let mut score = vec![0.0; n_way];
            for row in q.chunks_exact(n_way) {
                score.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            argmax_first(&score)
        })
        .collect()
}

pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---- evaluation ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalProtocol {
    pub split: Split,
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
}

impl EvalProtocol {
    pub fn new(split: Split, episodes: usize, n_way: usize, k_shot: usize) -> Self {
        Self {
            split,
            episodes,
            n_way,
            k_shot,
            q_per_class: 15,
        }
    }
}

/// Samples the `index`-th evaluation episode; its stream depends only on
/// `(seed, index)`.
pub fn eval_episode(bundle: &DatasetBundle, protocol: &EvalProtocol, seed: u64, index: usize) -> Result<Episode> {
    let mut rng = Stream::indexed(seed, "eval/episode", index as u64);
    sample_episode(bundle, protocol.split, protocol.n_way, protocol.k_shot, protocol.q_per_class, &mut rng)
}

/// Fraction of the un-rotated queries of one episode predicted correctly.
pub fn episode_accuracy(model: &PatchProto, episode: &Episode) -> Result<f64> {
    let preds = model.infer(episode)?;
    Ok(fraction_correct(&preds, &episode.query_labels))
}

/// Embeddings of every image of one split, computed once. Backbone and
/// neck act on each image independently, so episode predictions from the
/// cache equal [`PatchProto::infer`] exactly.
#[derive(Debug, Clone)]
pub struct SplitEmbeddings {
    rows: BTreeMap<usize, usize>,
    feats: Tensor,
}

const EMBED_BATCH: usize = 64;

impl SplitEmbeddings {
    pub fn new(model: &PatchProto, bundle: &DatasetBundle, split: Split) -> Result<Self> {
        let members: Vec<usize> = bundle.split_index(split).into_values().flatten().collect();
        if members.is_empty() {
            return Err(Error::Config(format!("split {split} is empty")));
        }
        let (ch, hh, ww) = bundle.image_dims();
        let per = ch * hh * ww;
        let mut data = Vec::new();
        let mut fshape = Vec::new();
        for chunk in members.chunks(EMBED_BATCH) {
            let mut batch = Vec::with_capacity(chunk.len() * per);
            for &i in chunk {
                batch.extend_from_slice(bundle.image(i).data());
            }
            let e = model.embed(&Tensor::new(&[chunk.len(), ch, hh, ww], batch)?)?;
            fshape = e.shape()[1..].to_vec();
            data.extend_from_slice(e.data());
        }
        let mut shape = vec![members.len()];
        shape.extend_from_slice(&fshape);
        let rows = members.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        Ok(Self {
            rows,
            feats: Tensor::new(&shape, data)?,
        })
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.feats.shape();
        let per: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for i in indices {
            let r = *self
                .rows
                .get(i)
                .ok_or_else(|| Error::Contract(format!("image {i} is not in the embedded split")))?;
            data.extend_from_slice(&self.feats.data()[r * per..(r + 1) * per]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        Tensor::new(&shape, data)
    }

    /// Per-query way predictions for an un-rotated episode drawn from the
    /// embedded split.
    pub fn infer(&self, model: &PatchProto, episode: &Episode) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let support = tape.constant(self.gather(&episode.support_indices)?);
        let query = tape.constant(self.gather(&episode.query_indices)?);
        let protos = prototypes_on(&mut tape, support, &episode.support_labels, episode.n_way)?;
        let (_, h, w) = model.feature_shape();
        let tokens = query_tokens(&mut tape, query)?;
        let logits = metric_logits_on(&mut tape, tokens, protos, model.config.temperature)?;
        let logp = tape.log_softmax(logits)?;
        Ok(aggregate_predictions(tape.value(logp), h * w, episode.n_way))
    }

    pub fn accuracy(&self, model: &PatchProto, episode: &Episode) -> Result<f64> {
        let preds = self.infer(model, episode)?;
        Ok(fraction_correct(&preds, &episode.query_labels))
    }
}

fn fraction_correct(preds: &[usize], labels: &[usize]) -> f64 {
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / preds.len() as f64
}

/// Per-episode accuracies in episode order.
pub fn evaluate_accuracies(model: &PatchProto, bundle: &DatasetBundle, protocol: &EvalProtocol, seed: u64) -> Result<Vec<f64>> {
    let cache = SplitEmbeddings::new(model, bundle, protocol.split)?;
    (0..protocol.episodes)
        .map(|i| cache.accuracy(model, &eval_episode(bundle, protocol, seed, i)?))
        .collect()
}

/// Mean accuracy and 95% confidence interval over `protocol.episodes`
/// episodes.
pub fn evaluate_protocol(
    model: &PatchProto,
    bundle: &DatasetBundle,
    protocol: &EvalProtocol,
    seed: u64,
    config_hash: &str,
) -> Result<MetricsRecord> {
    if protocol.episodes < 2 {
        return Err(Error::Contract(format!(
            "confidence interval needs at least 2 episodes, got {}",
            protocol.episodes
        )));
    }
    let acc = evaluate_accuracies(model, bundle, protocol, seed)?;
    MetricsRecord::from_accuracies(&acc, config_hash)
}

// ---- training ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Fraction of `steps` after which the learning rate is multiplied by
    /// `decay_factor` (once).
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Gradients are rescaled so their joint L2 norm is at most this; 0
    /// disables clipping.
    pub clip_norm: f64,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Validation every this many steps; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            momentum: 0.9,
            decay_at: 2.0 / 3.0,
            decay_factor: 0.1,
            clip_norm: 10.0,
            n_way: 5,
            k_shot: 1,
            q_per_class: 6,
            val_every: 0,
            val_episodes: 100,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let boundary = libm::floor(self.steps as f64 * self.decay_at) as usize;
        if step >= boundary {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Joint gradient norm before clipping.
    pub grad_norm: f64,
    pub metric: f64,
    pub global: Option<f64>,
    pub rotation: Option<f64>,
    pub alpha_g: Option<f64>,
    pub alpha_r: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// SGD with momentum over every parameter of a model.
pub struct Trainer {
    model: PatchProto,
    velocity: Vec<Tensor>,
    cfg: TrainConfig,
    step: usize,
    global_index: BTreeMap<usize, usize>,
}

impl Trainer {
    pub fn new(model: PatchProto, cfg: TrainConfig, global_index: BTreeMap<usize, usize>) -> Self {
        let velocity = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            model,
            velocity,
            cfg,
            step: 0,
            global_index,
        }
    }

    pub fn model(&self) -> &PatchProto {
        &self.model
    }

    pub fn into_model(self) -> PatchProto {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Loss of `episode` under the current parameters, without updating.
    pub fn loss(&self, episode: &Episode) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, false);
        let parts = self.model.episode_loss(&mut tape, &bound, episode, &self.global_index)?;
        tape.value(parts.total).item()
    }

    /// One update on a prepared episode. On a non-finite loss nothing is
    /// updated and [`Error::Diverged`] is returned; the parameters still
    /// hold the last finite state.
    pub fn step_on(&mut self, episode: &Episode) -> Result<LogEntry> {
        let mut tape = Tape::new().with_finite_checks(false);
        let bound = self.model.params.bind(&mut tape, true);
        let parts = self.model.episode_loss(&mut tape, &bound, episode, &self.global_index)?;
        let value = |v: Option<Var>, tape: &Tape| v.map(|v| tape.value(v).data()[0]);
        let loss = tape.value(parts.total).data()[0];
        if !loss.is_finite() {
            log::error!("non-finite loss {loss} at step {}", self.step);
            return Err(Error::Diverged { step: self.step, loss });
        }
        let entry_metric = tape.value(parts.metric).data()[0];
        let entry_global = value(parts.global, &tape);
        let entry_rotation = value(parts.rotation, &tape);
        let mut grads = tape.backward(parts.total)?;
        let lr = self.cfg.lr_at(self.step);
        let mu = self.cfg.momentum;
        let vars: Vec<Var> = bound.iter().map(|(_, v)| v).collect();
        let taken: Vec<Option<Tensor>> = vars.iter().map(|&v| grads.take(v)).collect();
        let sq: f64 = taken.iter().flatten().flat_map(|g| g.data()).map(|g| g * g).sum();
        if !sq.is_finite() {
            return Err(Error::Diverged { step: self.step, loss: f64::NAN });
        }
        let norm = libm::sqrt(sq);
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        for (((_, p), vel), g) in self.model.params.iter_mut().zip(&mut self.velocity).zip(taken) {
            let Some(g) = g else { continue };
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                *vv = mu * *vv + scale * gv;
                *pv -= lr * *vv;
            }
        }
        let (alpha_g, alpha_r) = self.model.alphas();
        let entry = LogEntry {
            step: self.step,
            lr,
            loss,
            grad_norm: norm,
            metric: entry_metric,
            global: entry_global,
            rotation: entry_rotation,
            alpha_g,
            alpha_r,
            val_accuracy: None,
        };
        self.step += 1;
        Ok(entry)
    }

    /// Samples the training episode for the current step from the base
    /// split and rotates its queries when the rotation head is on.
    pub fn next_episode(&self, bundle: &DatasetBundle, seed: u64) -> Result<Episode> {
        let mut rng = Stream::indexed(seed, "train/episode", self.step as u64);
        let e = sample_episode(bundle, Split::Base, self.cfg.n_way, self.cfg.k_shot, self.cfg.q_per_class, &mut rng)?;
        if self.model.config.use_rotation {
            rotate_queries(&e)
        } else {
            Ok(e)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy, or the final ones when
    /// validation is disabled.
    pub model: PatchProto,
    pub log: Vec<LogEntry>,
    pub best_step: usize,
    pub best_val: Option<f64>,
}

/// Episodic training on the base split. Deterministic for a given seed.
pub fn train(model: PatchProto, bundle: &DatasetBundle, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if bundle.classes(Split::Base).is_empty() {
        return Err(Error::Config("bundle has no base split".into()));
    }
    let global_index = model.global_index(bundle)?;
    let validate = cfg.val_every > 0 && !bundle.classes(Split::Val).is_empty();
    let val_protocol = EvalProtocol {
        split: Split::Val,
        episodes: cfg.val_episodes,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        q_per_class: cfg.q_per_class,
    };
    let mut trainer = Trainer::new(model, cfg.clone(), global_index);
    let mut log = Vec::with_capacity(cfg.steps);
    let mut best: Option<(f64, usize, PatchProto)> = None;
    for step in 0..cfg.steps {
        let episode = trainer.next_episode(bundle, seed)?;
        let mut entry = trainer.step_on(&episode)?;
        let last = step + 1 == cfg.steps;
        if validate && ((step + 1) % cfg.val_every == 0 || last) {
            let acc = evaluate_accuracies(trainer.model(), bundle, &val_protocol, seed ^ 0x5eed_0f_7a1)?;
            let mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
            entry.val_accuracy = Some(mean);
            log::info!("step {} loss {:.4} val {:.4}", step + 1, entry.loss, mean);
            if best.as_ref().is_none_or(|(b, _, _)| mean > *b) {
                best = Some((mean, step + 1, trainer.model().clone()));
            }
        }
        log.push(entry);
    }
    let steps_taken = trainer.steps_taken();
    Ok(match best {
        Some((acc, at, model)) => TrainOutcome {
            model,
            log,
            best_step: at,
            best_val: Some(acc),
        },
        None => TrainOutcome {
            model: trainer.into_model(),
            log,
            best_step: steps_taken,
            best_val: None,
        },
    })
}
