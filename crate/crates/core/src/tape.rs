//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Because an op can
//! only consume values that already exist, the recording order is a
//! topological order and the backward pass is a single reverse sweep.
//!
//! ```
//! use tsf_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_rows(&[&[3.0]]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```
//!
//! A tape is single-use: `backward` consumes it and a second call is
//! rejected. Build a fresh tape for every forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
/// Norm floor used when normalizing vectors for cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Recip(Var),
    Ln(Var),
    Relu(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    NormalizeSum(Var),
    NormalizeL2 { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Recip(..) => "recip",
            Op::Ln(..) => "ln",
            Op::Relu(..) => "relu",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::NormalizeSum(..) => "normalize_sum",
            Op::NormalizeL2 { .. } => "normalize_l2",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool(..) => "global_avg_pool",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// New tape; non-finite outputs are flagged after every op in debug
    /// builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            consumed: false,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            log::debug!("non-finite output from {}", op.name());
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.inputs_require_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => rg(a) || rg(b),
            Op::MulRow(a, b) | Op::Matmul(a, b) => rg(a) || rg(b),
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Recip(x)
            | Op::Ln(x)
            | Op::Relu(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::NormalizeSum(x)
            | Op::Sum(x)
            | Op::GlobalAvgPool(x) => rg(x),
            Op::Slice { x, .. }
            | Op::NormalizeL2 { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::MaxPool { x, .. } => rg(x),
            Op::CrossEntropy { logits, .. } => rg(logits),
            Op::Concat { parts, .. } => parts.iter().any(rg),
            Op::Conv2d { x, w, b } => rg(x) || rg(w) || rg(b),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.map(x, |a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.map(x, |a| a + s);
        self.push(v, Op::AddScalar(x))
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |a| 1.0 / a);
        self.push(v, Op::Recip(x))
    }

    /// Natural logarithm; non-positive inputs are a contract error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&a| a <= 0.0) {
            return Err(Error::Contract("ln of a non-positive value".into()));
        }
        let v = self.map(x, libm::log);
        self.push(v, Op::Ln(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.leaky_relu(x, 0.0)
    }

    /// `max(x, 0) + slope * min(x, 0)`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Contract(format!("leaky_relu slope {slope} outside [0, 1)")));
        }
        let v = self.map(x, |a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::Relu(x, slope))
    }

    /// `x[..., k] + row[k]`, broadcasting the row over all leading axes.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let k = self.row_broadcast_check("add_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let t = self.value(x);
        let data = t
            .data()
            .chunks_exact(k)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::AddRow(x, row))
    }

    /// `x[..., k] * row[k]`, broadcasting the row over all leading axes.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let k = self.row_broadcast_check("mul_row", x, row)?;
        let r = self.value(row).data().to_vec();
        let t = self.value(x);
        let data = t
            .data()
            .chunks_exact(k)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a * b))
            .collect();
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::MulRow(x, row))
    }

    fn row_broadcast_check(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let k = *self.shape(x).last().unwrap();
        if self.shape(row) != [k] {
            return Err(shape_err(
                op,
                format!("row {:?} against {:?}", self.shape(row), self.shape(x)),
            ));
        }
        Ok(k)
    }

    // ---- linear algebra --------------------------------------------------

    /// Matrix product of `[m, k] x [k, p]`, or the batched form
    /// `[B, m, k] x [B, k, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let (batch, m, k, p) = dims;
        let mut out = vec![0.0; batch * m * p];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::gemm_nn(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * p..(i + 1) * k * p],
                &mut out[i * m * p..(i + 1) * m * p],
                m,
                k,
                p,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, p]
        } else {
            vec![batch, m, p]
        };
        self.push(Tensor::from_parts(shape, out), Op::Matmul(a, b))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let perm: Vec<usize> = match s.len() {
            2 => vec![1, 0],
            3 => vec![0, 2, 1],
            r => return Err(shape_err("transpose", format!("rank {r} unsupported"))),
        };
        let v = kernels::permute(self.value(x), &perm);
        self.push(v, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(shape_err(
                "permute",
                format!("{perm:?} is not a permutation of rank {rank}"),
            ));
        }
        let v = kernels::permute(self.value(x), perm);
        self.push(v, Op::Permute(x, perm.to_vec()))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p).to_vec())
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    // ---- normalizations ----------------------------------------------------

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = kernels::softmax_last(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = kernels::log_softmax_last(self.value(x));
        self.push(v, Op::LogSoftmax(x))
    }

    /// Divides each last-axis row by its sum. Intended for positive inputs.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_exact_mut(k) {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(Error::Contract("normalize_sum of a zero row".into()));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::NormalizeSum(x))
    }

    /// Scales each last-axis row to unit L2 norm; norms below
    /// [`NORM_FLOOR`] are clamped to it.
    pub fn normalize_l2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / k);
        for row in data.chunks_exact_mut(k) {
            let raw = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if raw < NORM_FLOOR {
                log::debug!("normalize_l2: norm {raw:e} clamped to floor");
            }
            let n = raw.max(NORM_FLOOR);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(raw);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::NormalizeL2 { x, norms })
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine;
    /// compose with [`mul_row`](Self::mul_row)/[`add_row`](Self::add_row)).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / k);
        for row in data.chunks_exact_mut(k) {
            let mean = row.iter().sum::<f64>() / k as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(v, Op::LayerNorm { x, inv_std })
    }

    // ---- reductions and losses --------------------------------------------

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Summed cross-entropy of `[rows, classes]` logits against one label
    /// per row: `sum_r -log softmax(logits_r)[label_r]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} labels", t.shape(), labels.len()),
            ));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let logp = kernels::log_softmax_last(t);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -logp.data()[r * k + l])
            .sum();
        let probs = logp.data().iter().map(|&v| libm::exp(v)).collect();
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // ---- convolutional ----------------------------------------------------

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, 3, 3]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[2..] != [3, 3] || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(shape_err(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let v = kernels::conv3x3_forward(self.value(x), self.value(w), self.value(b));
        self.push(v, Op::Conv2d { x, w, b })
    }

    /// 2x2 max pooling with stride 2 over the last two axes of `[B, C, H, W]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("max_pool", format!("input {s:?}")));
        }
        let (v, argmax) = kernels::max_pool2_forward(self.value(x));
        self.push(v, Op::MaxPool { x, argmax })
    }

    /// Mean over the last two (spatial) axes: `[..., H, W] -> [...]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(shape_err("global_avg_pool", format!("input {s:?}")));
        }
        let hw = s[s.len() - 2] * s[s.len() - 1];
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::from_parts(s[..s.len() - 2].to_vec(), data);
        self.push(v, Op::GlobalAvgPool(x))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Fails on a non-scalar loss and on a second call. A loss that does not
    /// depend on any gradient-requiring leaf yields empty gradients and a
    /// warning.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward called twice on one tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            log::warn!("backward on a detached loss; no gradients produced");
            return Ok(Gradients::default());
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y)
                });
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x)
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s))
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::Recip(x) => self.accumulate(grads, *x, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(out)
                    .for_each(|((d, g), y)| *d -= g * y * y)
            }),
            Op::Ln(x) => {
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).zip(vx).for_each(|((d, g), x)| *d += g / x)
                })
            }
            Op::Relu(x, slope) => {
                let vx = self.value(*x).data();
                let slope = *slope;
                self.accumulate(grads, *x, |d| {
                    d.iter_mut()
                        .zip(g)
                        .zip(vx)
                        .for_each(|((d, g), x)| *d += if *x > 0.0 { *g } else { slope * g })
                })
            }
            Op::AddRow(x, row) => {
                let k = self.value(*row).len();
                self.accumulate(grads, *x, |d| add_into(d, g));
                self.accumulate(grads, *row, |d| {
                    for chunk in g.chunks_exact(k) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MulRow(x, row) => {
                let r = self.value(*row).data();
                let k = r.len();
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for (dc, gc) in d.chunks_exact_mut(k).zip(g.chunks_exact(k)) {
                        dc.iter_mut().zip(gc).zip(r).for_each(|((d, g), r)| *d += g * r);
                    }
                });
                self.accumulate(grads, *row, |d| {
                    for (xc, gc) in vx.chunks_exact(k).zip(g.chunks_exact(k)) {
                        d.iter_mut().zip(gc).zip(xc).for_each(|((d, g), x)| *d += g * x);
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (batch, m, k, p) = matmul_dims(ta.shape(), tb.shape()).expect("checked");
                let (va, vb) = (ta.data(), tb.data());
                self.accumulate(grads, *a, |d| {
                    for i in 0..batch {
                        // dA = dC * B^T
                        kernels::gemm_nt(
                            &g[i * m * p..(i + 1) * m * p],
                            &vb[i * k * p..(i + 1) * k * p],
                            &mut d[i * m * k..(i + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for i in 0..batch {
                        // dB = A^T * dC
                        kernels::gemm_tn(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * p..(i + 1) * m * p],
                            &mut d[i * k * p..(i + 1) * k * p],
                            k,
                            m,
                            p,
                        );
                    }
                });
            }
            Op::Transpose(x) => {
                let perm: &[usize] = if node.value.rank() == 2 { &[1, 0] } else { &[0, 2, 1] };
                let gt = kernels::permute(&Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()), perm);
                self.accumulate(grads, *x, |d| add_into(d, gt.data()));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |d| add_into(d, g)),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = kernels::permute(&Tensor::from_parts(node.value.shape().to_vec(), g.to_vec()), &inv);
                self.accumulate(grads, *x, |d| add_into(d, gt.data()));
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let full = s[*axis];
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let row = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    self.accumulate(grads, p, |d| {
                        for o in 0..outer {
                            add_into(&mut d[o * len..(o + 1) * len], &g[o * row + offset..o * row + offset + len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |d| {
                    for ((dc, gc), yc) in d.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(out.chunks_exact(k)) {
                        let dot: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                        dc.iter_mut().zip(gc).zip(yc).for_each(|((d, g), y)| *d += y * (g - dot));
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let k = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |d| {
                    for ((dc, gc), yc) in d.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(out.chunks_exact(k)) {
                        let total: f64 = gc.iter().sum();
                        dc.iter_mut()
                            .zip(gc)
                            .zip(yc)
                            .for_each(|((d, g), y)| *d += g - libm::exp(*y) * total);
                    }
                });
            }
            Op::NormalizeSum(x) => {
                let k = *node.value.shape().last().unwrap();
                let vx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for (((dc, gc), yc), xc) in d
                        .chunks_exact_mut(k)
                        .zip(g.chunks_exact(k))
                        .zip(out.chunks_exact(k))
                        .zip(vx.chunks_exact(k))
                    {
                        let s: f64 = xc.iter().sum();
                        let dot: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                        dc.iter_mut().zip(gc).for_each(|(d, g)| *d += (g - dot) / s);
                    }
                });
            }
            Op::NormalizeL2 { x, norms } => {
                let k = *node.value.shape().last().unwrap();
                self.accumulate(grads, *x, |d| {
                    for (((dc, gc), yc), &n) in d
                        .chunks_exact_mut(k)
                        .zip(g.chunks_exact(k))
                        .zip(out.chunks_exact(k))
                        .zip(norms)
                    {
                        if n < NORM_FLOOR {
                            dc.iter_mut().zip(gc).for_each(|(d, g)| *d += g / NORM_FLOOR);
                        } else {
                            let dot: f64 = gc.iter().zip(yc).map(|(g, y)| g * y).sum();
                            dc.iter_mut()
                                .zip(gc)
                                .zip(yc)
                                .for_each(|((d, g), y)| *d += (g - y * dot) / n);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let k = *node.value.shape().last().unwrap();
                let kf = k as f64;
                self.accumulate(grads, *x, |d| {
                    for (((dc, gc), yc), &is) in d
                        .chunks_exact_mut(k)
                        .zip(g.chunks_exact(k))
                        .zip(out.chunks_exact(k))
                        .zip(inv_std)
                    {
                        let mg = gc.iter().sum::<f64>() / kf;
                        let mgy = gc.iter().zip(yc).map(|(g, y)| g * y).sum::<f64>() / kf;
                        dc.iter_mut()
                            .zip(gc)
                            .zip(yc)
                            .for_each(|((d, g), y)| *d += is * (g - mg - y * mgy));
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                self.accumulate(grads, *logits, |d| {
                    for (r, &l) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == l { 1.0 } else { 0.0 };
                            d[r * k + c] += g[0] * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let back = kernels::conv3x3_backward(tx, tw, g, self.requires_grad(*x));
                self.accumulate(grads, *w, |d| add_into(d, &back.dw));
                self.accumulate(grads, *b, |d| add_into(d, &back.db));
                if let Some(dx) = back.dx {
                    self.accumulate(grads, *x, |d| add_into(d, &dx));
                }
            }
            Op::MaxPool { x, argmax } => self.accumulate(grads, *x, |d| {
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] += gv;
                }
            }),
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[s.len() - 2] * s[s.len() - 1];
                let inv = 1.0 / hw as f64;
                self.accumulate(grads, *x, |d| {
                    for (dc, gv) in d.chunks_exact_mut(hw).zip(g) {
                        dc.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// `(batch, m, k, p)` for a supported matmul pairing.
fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let bad = || shape_err("matmul", format!("{sa:?} x {sb:?}"));
    match (sa.len(), sb.len()) {
        (2, 2) if sa[1] == sb[0] => Ok((1, sa[0], sa[1], sb[1])),
        (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => Ok((sa[0], sa[1], sa[2], sb[2])),
        _ => Err(bad()),
    }
}
