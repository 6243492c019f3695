//! `{Q, K, V}` attention wirings used as a feature-to-feature neck.
//!
//! Every non-identity variant computes an attention response `A` for each
//! spatial position of the input `f` (viewed as `hw x c` tokens) and closes
//! with the same block, `FFN(f + A)`, so variants differ only in how `Q`,
//! `K` and `V` are wired:
//!
//! | kind               | Q        | K        | V        |
//! |--------------------|----------|----------|----------|
//! | `transformer`      | f        | f        | f        |
//! | `transformer-proj` | W_Q f    | W_K f    | W_V f    |
//! | `detr`             | θ        | f        | f        |
//! | `tsf`              | f        | θ        | θ        |
//! | `tsf-proj`         | W_Q f    | W_K θ    | W_V θ    |
//! | `tsf-k`            | f        | θ        | f        |
//! | `tsf-v`            | f        | f        | θ        |
//!
//! `θ` is the learnable `n x c` semantic filter. For `tsf` the response is
//! `A = softmax(f θᵀ) θ`: each position is replaced by a convex combination
//! of filter rows.
//!
//! `detr`, `tsf-k` and `tsf-v` do not compose into an `hw x c` response
//! under plain attention, so they are mapped back to the spatial grid:
//! - `detr`: `W = softmax(θ fᵀ)` (`n x hw`, softmax over positions),
//!   decoded queries `D = W f`, response `A = Wᵀ D`.
//! - `tsf-k`: `S = softmax(f θᵀ)`, per-filter weighted means of `f`
//!   `P = colnorm(S)ᵀ f`, response `A = S P`.
//! - `tsf-v`: `A = softmax(f fᵀ) (softmax(f θᵀ) θ)`, self-attention over
//!   filter responses.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::params::{gaussian, Bound, ParamStore};
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NeckKind {
    None,
    Transformer,
    TransformerProj,
    Detr,
    Tsf,
    TsfProj,
    TsfK,
    TsfV,
}

impl NeckKind {
    pub const ALL: [NeckKind; 8] = [
        NeckKind::None,
        NeckKind::Transformer,
        NeckKind::TransformerProj,
        NeckKind::Detr,
        NeckKind::Tsf,
        NeckKind::TsfProj,
        NeckKind::TsfK,
        NeckKind::TsfV,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NeckKind::None => "none",
            NeckKind::Transformer => "transformer",
            NeckKind::TransformerProj => "transformer-proj",
            NeckKind::Detr => "detr",
            NeckKind::Tsf => "tsf",
            NeckKind::TsfProj => "tsf-proj",
            NeckKind::TsfK => "tsf-k",
            NeckKind::TsfV => "tsf-v",
        }
    }

    /// Whether the variant owns a semantic filter (or DETR object queries).
    pub fn has_filter(self) -> bool {
        matches!(
            self,
            NeckKind::Detr | NeckKind::Tsf | NeckKind::TsfProj | NeckKind::TsfK | NeckKind::TsfV
        )
    }

    pub fn has_projections(self) -> bool {
        matches!(self, NeckKind::TransformerProj | NeckKind::TsfProj)
    }

    /// Number of keys each spatial query attends over, in units where
    /// the input has `hw` positions and the filter `n` rows.
    fn keys(self, hw: u128, n: u128) -> u128 {
        match self {
            NeckKind::None => 0,
            NeckKind::Transformer | NeckKind::TransformerProj | NeckKind::Detr | NeckKind::TsfV => hw,
            NeckKind::Tsf | NeckKind::TsfProj | NeckKind::TsfK => n,
        }
    }
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NeckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        NeckKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown neck kind {s:?}")))
    }
}

/// How the closing feed-forward block behaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnMode {
    /// Post-norm block: `z = LN(x)`, `out = LN(z + W2 relu(W1 z + b1) + b2)`.
    Standard,
    /// The block is the identity and owns no parameters. Test rig only.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeckVariant {
    pub kind: NeckKind,
    pub heads: usize,
    /// Filter rows (`n`); also the number of DETR object queries.
    pub n: usize,
    pub c: usize,
    pub ffn_hidden: usize,
    /// Divide attention logits by `sqrt(c / heads)`. Off by default.
    pub scaled: bool,
    pub ffn: FfnMode,
}

impl NeckVariant {
    pub fn new(kind: NeckKind, c: usize) -> Self {
        Self {
            kind,
            heads: 1,
            n: 5,
            c,
            ffn_hidden: c,
            scaled: false,
            ffn: FfnMode::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.heads == 0 || self.n == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(format!("neck dimensions must be positive: {self:?}")));
        }
        if self.c % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by {} heads",
                self.c, self.heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.c / self.heads
    }
}

/// Learnable `n x c` filter.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticFilter {
    pub theta: Tensor,
}

impl SemanticFilter {
    /// Zero-mean Gaussian rows with standard deviation `1/sqrt(c)`.
    pub fn init(n: usize, c: usize, rng: &mut Stream) -> Self {
        Self {
            theta: gaussian(&[n, c], 1.0 / libm::sqrt(c as f64), rng),
        }
    }

    pub fn n(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.theta.shape()[1]
    }
}

/// Per-position feed-forward block parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnBlock {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
}

impl FfnBlock {
    pub fn init(c: usize, hidden: usize, rng: &mut Stream) -> Self {
        Self {
            w1: gaussian(&[c, hidden], 1.0 / libm::sqrt(c as f64), rng),
            b1: Tensor::zeros(&[hidden]),
            w2: gaussian(&[hidden, c], 1.0 / libm::sqrt(hidden as f64), rng),
            b2: Tensor::zeros(&[c]),
            norm1_gain: Tensor::full(&[c], 1.0),
            norm1_bias: Tensor::zeros(&[c]),
            norm2_gain: Tensor::full(&[c], 1.0),
            norm2_bias: Tensor::zeros(&[c]),
        }
    }

    fn entries(self) -> [(&'static str, Tensor); 8] {
        [
            ("ffn.w1", self.w1),
            ("ffn.b1", self.b1),
            ("ffn.w2", self.w2),
            ("ffn.b2", self.b2),
            ("ffn.norm1.gain", self.norm1_gain),
            ("ffn.norm1.bias", self.norm1_bias),
            ("ffn.norm2.gain", self.norm2_gain),
            ("ffn.norm2.bias", self.norm2_bias),
        ]
    }
}

/// Tape handles for an [`FfnBlock`].
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
}

impl FfnVars {
    pub fn bind(tape: &mut Tape, block: &FfnBlock, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        Self {
            w1: leaf(&block.w1),
            b1: leaf(&block.b1),
            w2: leaf(&block.w2),
            b2: leaf(&block.b2),
            norm1_gain: leaf(&block.norm1_gain),
            norm1_bias: leaf(&block.norm1_bias),
            norm2_gain: leaf(&block.norm2_gain),
            norm2_bias: leaf(&block.norm2_bias),
        }
    }

    fn from_bound(bound: &Bound, prefix: &str) -> Result<Self> {
        let get = |s: &str| bound.get(&format!("{prefix}{s}"));
        Ok(Self {
            w1: get("ffn.w1")?,
            b1: get("ffn.b1")?,
            w2: get("ffn.w2")?,
            b2: get("ffn.b2")?,
            norm1_gain: get("ffn.norm1.gain")?,
            norm1_bias: get("ffn.norm1.bias")?,
            norm2_gain: get("ffn.norm2.gain")?,
            norm2_bias: get("ffn.norm2.bias")?,
        })
    }
}

/// Prefix under which neck parameters live in a [`ParamStore`].
pub const NECK_PREFIX: &str = "neck.";

/// Adds the parameters of `variant` to `store` under [`NECK_PREFIX`].
pub fn init_neck(variant: &NeckVariant, rng: &mut Stream, store: &mut ParamStore) -> Result<()> {
    variant.validate()?;
    if variant.kind == NeckKind::None {
        return Ok(());
    }
    let c = variant.c;
    let name = |s: &str| format!("{NECK_PREFIX}{s}");
    if variant.kind.has_filter() {
        store.insert(&name("theta"), SemanticFilter::init(variant.n, c, rng).theta)?;
    }
    if variant.kind.has_projections() {
        let std = 1.0 / libm::sqrt(c as f64);
        for p in ["q", "k", "v"] {
            store.insert(&name(&format!("proj_{p}.weight")), gaussian(&[c, c], std, rng))?;
            store.insert(&name(&format!("proj_{p}.bias")), Tensor::zeros(&[c]))?;
        }
    }
    if variant.ffn == FfnMode::Standard {
        for (n, t) in FfnBlock::init(c, variant.ffn_hidden, rng).entries() {
            store.insert(&name(n), t)?;
        }
    }
    Ok(())
}

/// Learnable scalars owned by the neck (backbone and heads excluded).
pub fn count_parameters(_variant: &NeckVariant, params: &ParamStore) -> usize {
    params.count_scalars(NECK_PREFIX)
}

/// Multiply-accumulate count of the attention step, counting only the
/// score product and the value product under the complexity convention in
/// which every one of the `hw` output positions is charged `hw * keys * c`:
/// self-attention (`keys = hw`) costs `(hw)^3 c` and the semantic filter
/// (`keys = n`) costs `(hw)^2 n c`. Heads split `c` and do not change the
/// total. FFN and projections are excluded.
pub fn count_attention_macs(kind: NeckKind, h: usize, w: usize, c: usize, n: usize, _heads: usize) -> u128 {
    let hw = (h * w) as u128;
    hw * hw * kind.keys(hw, n as u128) * c as u128
}

// ---- forward ---------------------------------------------------------------

/// `softmax(Q Kᵀ) V` per head, heads concatenated along channels.
///
/// Accepts `[a, c] / [b, c] / [b, c]` or the batched `[B, a, c] / [B, b, c]
/// / [B, b, c]` form. With `scaled`, logits are divided by `sqrt(c/heads)`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, scaled: bool) -> Result<Var> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    let rank = sq.len();
    let consistent = (rank == 2 || rank == 3)
        && sk.len() == rank
        && sv.len() == rank
        && sk == sv
        && sq[rank - 1] == sk[rank - 1]
        && (rank == 2 || sq[0] == sk[0]);
    if !consistent {
        return Err(shape_err("attention", format!("Q {sq:?}, K {sk:?}, V {sv:?}")));
    }
    let c = sq[rank - 1];
    if heads == 0 || c % heads != 0 {
        return Err(shape_err("attention", format!("{c} channels across {heads} heads")));
    }
    let d = c / heads;
    let axis = rank - 1;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, axis, h * d, d)?,
                tape.slice(k, axis, h * d, d)?,
                tape.slice(v, axis, h * d, d)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let mut logits = tape.matmul(qh, kt)?;
        if scaled {
            logits = tape.scale(logits, 1.0 / libm::sqrt(d as f64))?;
        }
        let weights = tape.softmax(logits)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, axis)
    }
}

/// `[B, c, h, w] -> [B, hw, c]`
pub fn to_tokens(tape: &mut Tape, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 4 {
        return Err(shape_err("to_tokens", format!("expected [B, c, h, w], got {s:?}")));
    }
    let p = tape.permute(f, &[0, 2, 3, 1])?;
    tape.reshape(p, &[s[0], s[2] * s[3], s[1]])
}

/// `[B, hw, c] -> [B, c, h, w]`
pub fn from_tokens(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], h, w, s[2]])?;
    tape.permute(r, &[0, 3, 1, 2])
}

/// Applies the closing block to tokens of any leading shape.
pub fn ffn_forward(tape: &mut Tape, x: Var, ffn: Option<&FfnVars>) -> Result<Var> {
    let Some(p) = ffn else { return Ok(x) };
    let z = tape.layer_norm(x)?;
    let z = tape.mul_row(z, p.norm1_gain)?;
    let z = tape.add_row(z, p.norm1_bias)?;
    let shape = tape.shape(z).to_vec();
    let c = *shape.last().unwrap();
    let rows = tape.value(z).len() / c;
    let flat = tape.reshape(z, &[rows, c])?;
    let hidden = tape.matmul(flat, p.w1)?;
    let hidden = tape.add_row(hidden, p.b1)?;
    let hidden = tape.relu(hidden)?;
    let y = tape.matmul(hidden, p.w2)?;
    let y = tape.add_row(y, p.b2)?;
    let y = tape.add(flat, y)?;
    let y = tape.layer_norm(y)?;
    let y = tape.mul_row(y, p.norm2_gain)?;
    let y = tape.add_row(y, p.norm2_bias)?;
    tape.reshape(y, &shape)
}

/// Semantic-filter response `softmax(x θᵀ) θ` for `[rows, c]` tokens.
fn filter_response(tape: &mut Tape, x: Var, theta: Var, heads: usize, scaled: bool) -> Result<Var> {
    attention(tape, x, theta, theta, heads, scaled)
}

/// `FFN(f + softmax(f θᵀ) θ)` for a single `[c, h, w]` feature map or a
/// `[B, c, h, w]` batch. Every spatial position attends independently over
/// the `n` filter rows.
pub fn tsf_forward(tape: &mut Tape, f: Var, theta: Var, ffn: Option<&FfnVars>, heads: usize) -> Result<Var> {
    let single = tape.shape(f).len() == 3;
    let f4 = if single {
        let s = tape.shape(f).to_vec();
        tape.reshape(f, &[1, s[0], s[1], s[2]])?
    } else {
        f
    };
    let s = tape.shape(f4).to_vec();
    if s.len() != 4 || tape.shape(theta).len() != 2 || tape.shape(theta)[1] != s[1] {
        return Err(shape_err(
            "tsf_forward",
            format!("feature {:?} against filter {:?}", tape.shape(f), tape.shape(theta)),
        ));
    }
    let tokens = to_tokens(tape, f4)?;
    let flat = tape.reshape(tokens, &[s[0] * s[2] * s[3], s[1]])?;
    let a = filter_response(tape, flat, theta, heads, false)?;
    let pre = tape.add(flat, a)?;
    let out = ffn_forward(tape, pre, ffn)?;
    let out = tape.reshape(out, &[s[0], s[2] * s[3], s[1]])?;
    let out = from_tokens(tape, out, s[2], s[3])?;
    if single {
        tape.reshape(out, &s[1..])
    } else {
        Ok(out)
    }
}

/// Runs the neck described by `variant` on `[B, c, h, w]` features, with
/// parameters looked up in `bound` under [`NECK_PREFIX`].
pub fn neck_forward(tape: &mut Tape, variant: &NeckVariant, bound: &Bound, f: Var) -> Result<Var> {
    variant.validate()?;
    if variant.kind == NeckKind::None {
        return Ok(f);
    }
    let s = tape.shape(f).to_vec();
    if s.len() != 4 || s[1] != variant.c {
        return Err(shape_err(
            "neck_forward",
            format!("features {s:?} for a neck with c = {}", variant.c),
        ));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let get = |name: &str| bound.get(&format!("{NECK_PREFIX}{name}"));
    let ffn = match variant.ffn {
        FfnMode::Standard => Some(FfnVars::from_bound(bound, NECK_PREFIX)?),
        FfnMode::Identity => None,
    };
    let tokens = to_tokens(tape, f)?;
    let flat = tape.reshape(tokens, &[b * hw, c])?;
    let heads = variant.heads;
    let scaled = variant.scaled;

    let response = match variant.kind {
        NeckKind::None => unreachable!(),
        NeckKind::Transformer => {
            let a = attention(tape, tokens, tokens, tokens, heads, scaled)?;
            tape.reshape(a, &[b * hw, c])?
        }
        NeckKind::TransformerProj => {
            let q = project(tape, flat, &get, "q")?;
            let k = project(tape, flat, &get, "k")?;
            let v = project(tape, flat, &get, "v")?;
            let (q, k, v) = (
                tape.reshape(q, &[b, hw, c])?,
                tape.reshape(k, &[b, hw, c])?,
                tape.reshape(v, &[b, hw, c])?,
            );
            let a = attention(tape, q, k, v, heads, scaled)?;
            tape.reshape(a, &[b * hw, c])?
        }
        NeckKind::Tsf => filter_response(tape, flat, get("theta")?, heads, scaled)?,
        NeckKind::TsfProj => {
            let theta = get("theta")?;
            let q = project(tape, flat, &get, "q")?;
            let k = project(tape, theta, &get, "k")?;
            let v = project(tape, theta, &get, "v")?;
            attention(tape, q, k, v, heads, scaled)?
        }
        NeckKind::Detr => per_head(tape, flat, get("theta")?, variant, b, hw, detr_head)?,
        NeckKind::TsfK => per_head(tape, flat, get("theta")?, variant, b, hw, tsf_k_head)?,
        NeckKind::TsfV => per_head(tape, flat, get("theta")?, variant, b, hw, tsf_v_head)?,
    };
    let pre = tape.add(flat, response)?;
    let out = ffn_forward(tape, pre, ffn.as_ref())?;
    let out = tape.reshape(out, &[b, hw, c])?;
    from_tokens(tape, out, h, w)
}

fn project(
    tape: &mut Tape,
    x: Var,
    get: &dyn Fn(&str) -> Result<Var>,
    which: &str,
) -> Result<Var> {
    let wv = get(&format!("proj_{which}.weight"))?;
    let bv = get(&format!("proj_{which}.bias"))?;
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

type HeadFn = fn(&mut Tape, Var, Var, usize, usize, f64) -> Result<Var>;

/// Splits channels across heads, applies `head` to each `[B*hw, d]` slice
/// with its `[n, d]` filter slice and concatenates the `[B*hw, d]` results.
fn per_head(
    tape: &mut Tape,
    flat: Var,
    theta: Var,
    variant: &NeckVariant,
    b: usize,
    hw: usize,
    head: HeadFn,
) -> Result<Var> {
    let d = variant.head_dim();
    let scale = if variant.scaled { 1.0 / libm::sqrt(d as f64) } else { 1.0 };
    let mut outs = Vec::with_capacity(variant.heads);
    for hd in 0..variant.heads {
        let (x, th) = if variant.heads == 1 {
            (flat, theta)
        } else {
            (tape.slice(flat, 1, hd * d, d)?, tape.slice(theta, 1, hd * d, d)?)
        };
        outs.push(head(tape, x, th, b, hw, scale)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Scores of every position against every filter row, `[B, hw, n]`.
fn position_filter_logits(tape: &mut Tape, x: Var, theta: Var, b: usize, hw: usize, scale: f64) -> Result<Var> {
    let n = tape.shape(theta)[0];
    let tt = tape.transpose(theta)?;
    let mut logits = tape.matmul(x, tt)?;
    if scale != 1.0 {
        logits = tape.scale(logits, scale)?;
    }
    tape.reshape(logits, &[b, hw, n])
}

fn detr_head(tape: &mut Tape, x: Var, theta: Var, b: usize, hw: usize, scale: f64) -> Result<Var> {
    let d = tape.shape(x)[1];
    let logits = position_filter_logits(tape, x, theta, b, hw, scale)?;
    let per_query = tape.transpose(logits)?; // [B, n, hw]
    let weights = tape.softmax(per_query)?;
    let xb = tape.reshape(x, &[b, hw, d])?;
    let decoded = tape.matmul(weights, xb)?; // [B, n, d]
    let back = tape.transpose(weights)?; // [B, hw, n]
    let a = tape.matmul(back, decoded)?;
    tape.reshape(a, &[b * hw, d])
}

fn tsf_k_head(tape: &mut Tape, x: Var, theta: Var, b: usize, hw: usize, scale: f64) -> Result<Var> {
    let d = tape.shape(x)[1];
    let logits = position_filter_logits(tape, x, theta, b, hw, scale)?;
    let s = tape.softmax(logits)?; // [B, hw, n]
    let st = tape.transpose(s)?;
    let pool = tape.normalize_sum(st)?; // [B, n, hw]
    let xb = tape.reshape(x, &[b, hw, d])?;
    let pooled = tape.matmul(pool, xb)?; // [B, n, d]
    let a = tape.matmul(s, pooled)?;
    tape.reshape(a, &[b * hw, d])
}

fn tsf_v_head(tape: &mut Tape, x: Var, theta: Var, b: usize, hw: usize, scale: f64) -> Result<Var> {
    let d = tape.shape(x)[1];
    let logits = position_filter_logits(tape, x, theta, b, hw, scale)?;
    let s = tape.softmax(logits)?;
    let s = tape.reshape(s, &[b * hw, tape.shape(theta)[0]])?;
    let values = tape.matmul(s, theta)?;
    let values = tape.reshape(values, &[b, hw, d])?;
    let xb = tape.reshape(x, &[b, hw, d])?;
    let xt = tape.transpose(xb)?;
    let mut self_logits = tape.matmul(xb, xt)?;
    if scale != 1.0 {
        self_logits = tape.scale(self_logits, scale)?;
    }
    let weights = tape.softmax(self_logits)?;
    let a = tape.matmul(weights, values)?;
    tape.reshape(a, &[b * hw, d])
}

/// Correlation map `R = softmax(f θᵀ)` (`hw x n`) of one `[c, h, w]`
/// feature map against a filter, computed without a tape.
pub fn correlation_map(f: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let tv = tape.constant(theta.clone());
    let s = tape.shape(fv).to_vec();
    if s.len() != 3 || tape.shape(tv).len() != 2 || tape.shape(tv)[1] != s[0] {
        return Err(shape_err(
            "correlation_map",
            format!("feature {:?} against filter {:?}", f.shape(), theta.shape()),
        ));
    }
    let f4 = tape.reshape(fv, &[1, s[0], s[1], s[2]])?;
    let tokens = to_tokens(&mut tape, f4)?;
    let flat = tape.reshape(tokens, &[s[1] * s[2], s[0]])?;
    let tt = tape.transpose(tv)?;
    let logits = tape.matmul(flat, tt)?;
    let r = tape.softmax(logits)?;
    Ok(tape.value(r).clone())
}

/// Human-readable `{Q, K, V}` assignment of a variant.
pub fn wiring(kind: NeckKind) -> String {
    String::from(match kind {
        NeckKind::None => "-",
        NeckKind::Transformer => "Q=K=V=f",
        NeckKind::TransformerProj => "Q=W_Q f, K=W_K f, V=W_V f",
        NeckKind::Detr => "Q=θ, K=V=f",
        NeckKind::Tsf => "Q=f, K=V=θ",
        NeckKind::TsfProj => "Q=W_Q f, K=W_K θ, V=W_V θ",
        NeckKind::TsfK => "Q=V=f, K=θ",
        NeckKind::TsfV => "Q=K=f, V=θ",
    })
}
