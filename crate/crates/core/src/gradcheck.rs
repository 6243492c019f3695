//! Central-difference gradient checking against [`Tape::backward`].

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

/// Outcome of a multi-input check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub evaluated: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares analytic gradients of a scalar function of several tensors with
/// central differences and returns the largest relative error, where the
/// relative error of one element is `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `f` must be deterministic: it is evaluated twice at the base point and a
/// bitwise disagreement is reported as [`Error::OracleInvalid`].
pub fn check_gradients<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Contract(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    let mut grads = tape.backward(out)?;

    let first = eval_scalar(&f, inputs)?;
    let second = eval_scalar(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "function is not deterministic: {first:e} vs {second:e}"
        )));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        evaluated: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, &var) in vars.iter().enumerate() {
        let analytic = grads.take(var).map(Tensor::into_data);
        for ei in 0..inputs[ti].len() {
            let base = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = base + eps;
            let plus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[ei] = base - eps;
            let minus = eval_scalar(&f, &probe)?;
            probe[ti].data_mut()[ei] = base;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[ei]);
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(DENOM_FLOOR);
            let rel = libm::fabs(a - numeric) / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
            }
            report.evaluated += 1;
        }
    }
    Ok(report)
}

/// Single-input form: max relative error between backward and central
/// differences for a scalar function of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(|t, v| f(t, v[0]), core::slice::from_ref(x), eps).map(|r| r.max_rel_error)
}
