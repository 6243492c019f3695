mod common;

use common::{away_from_zero, normal, project, uniform};
use tsf_core::attention::{self, FfnVars};
use tsf_core::gradcheck::{check_gradients, DEFAULT_EPS};
use tsf_core::{Result, Tape, Tensor, Var};

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn check<I, F>(name: &str, inputs: I, f: F)
where
    I: Fn(u64) -> Vec<Tensor>,
    F: Fn(&mut Tape, &[Var], u64) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let report = check_gradients(|t, v| f(t, v, seed), &inputs(seed), DEFAULT_EPS).unwrap();
        assert!(report.evaluated > 0);
        worst = worst.max(report.max_rel_error);
        assert!(
            report.max_rel_error < TOL,
            "{name}, seed {seed}: rel error {:e} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
    assert!(worst.is_finite());
}

fn n<'a>(shape: &'a [usize], label: &'static str) -> impl Fn(u64) -> Tensor + 'a {
    move |s| normal(shape, s, label)
}

#[test]
fn elementwise() {
    let two = |s: u64| vec![normal(&[3, 4], s, "a"), normal(&[3, 4], s, "b")];
    check("add", two, |t, v, s| {
        let y = t.add(v[0], v[1])?;
        project(t, y, s)
    });
    check("sub", two, |t, v, s| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, s)
    });
    check("mul", two, |t, v, s| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, s)
    });
    check("scale", |s| vec![n(&[5], "x")(s)], |t, v, s| {
        let y = t.scale(v[0], -1.7)?;
        project(t, y, s)
    });
    check("add_scalar", |s| vec![n(&[5], "x")(s)], |t, v, s| {
        let y = t.add_scalar(v[0], 0.3)?;
        let y = t.mul(y, y)?;
        project(t, y, s)
    });
    let pos = |s: u64| vec![uniform(&[2, 3], 0.5, 2.0, s, "p")];
    check("recip", pos, |t, v, s| {
        let y = t.recip(v[0])?;
        project(t, y, s)
    });
    check("ln", pos, |t, v, s| {
        let y = t.ln(v[0])?;
        project(t, y, s)
    });
    let kinked = |s: u64| vec![away_from_zero(&[4, 4], 1e-3, s, "k")];
    check("relu", kinked, |t, v, s| {
        let y = t.relu(v[0])?;
        project(t, y, s)
    });
    check("leaky_relu", kinked, |t, v, s| {
        let y = t.leaky_relu(v[0], 0.1)?;
        project(t, y, s)
    });
}

#[test]
fn row_broadcasts() {
    let inputs = |s: u64| vec![normal(&[2, 3, 4], s, "x"), normal(&[4], s, "r")];
    check("add_row", inputs, |t, v, s| {
        let y = t.add_row(v[0], v[1])?;
        project(t, y, s)
    });
    check("mul_row", inputs, |t, v, s| {
        let y = t.mul_row(v[0], v[1])?;
        project(t, y, s)
    });
}

#[test]
fn products_and_layout() {
    check("matmul", |s| vec![normal(&[3, 4], s, "a"), normal(&[4, 5], s, "b")], |t, v, s| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, s)
    });
    check(
        "batched matmul",
        |s| vec![normal(&[2, 3, 4], s, "a"), normal(&[2, 4, 2], s, "b")],
        |t, v, s| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, s)
        },
    );
    check("transpose", |s| vec![normal(&[2, 3, 4], s, "x")], |t, v, s| {
        let y = t.transpose(v[0])?;
        project(t, y, s)
    });
    check("reshape", |s| vec![normal(&[2, 6], s, "x")], |t, v, s| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y, s)
    });
    check("permute", |s| vec![normal(&[2, 3, 4], s, "x")], |t, v, s| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        project(t, y, s)
    });
    check("slice", |s| vec![normal(&[3, 5], s, "x")], |t, v, s| {
        let y = t.slice(v[0], 1, 1, 3)?;
        project(t, y, s)
    });
    check("concat", |s| vec![normal(&[2, 3], s, "a"), normal(&[2, 2], s, "b")], |t, v, s| {
        let y = t.concat(&[v[0], v[1], v[0]], 1)?;
        project(t, y, s)
    });
}

#[test]
fn normalizations() {
    let x = |s: u64| vec![normal(&[3, 5], s, "x")];
    check("softmax", x, |t, v, s| {
        let y = t.softmax(v[0])?;
        project(t, y, s)
    });
    check("log_softmax", x, |t, v, s| {
        let y = t.log_softmax(v[0])?;
        project(t, y, s)
    });
    check("normalize_sum", |s| vec![uniform(&[3, 4], 0.2, 2.0, s, "p")], |t, v, s| {
        let y = t.normalize_sum(v[0])?;
        project(t, y, s)
    });
    check("normalize_l2", x, |t, v, s| {
        let y = t.normalize_l2(v[0])?;
        project(t, y, s)
    });
    check("layer_norm", x, |t, v, s| {
        let y = t.layer_norm(v[0])?;
        project(t, y, s)
    });
}

#[test]
fn reductions_and_losses() {
    check("sum", |s| vec![normal(&[3, 2], s, "x")], |t, v, _| {
        let y = t.mul(v[0], v[0])?;
        t.sum(y)
    });
    check("mean", |s| vec![normal(&[3, 2], s, "x")], |t, v, _| {
        let y = t.mul(v[0], v[0])?;
        t.mean(y)
    });
    check("cross_entropy", |s| vec![normal(&[6, 4], s, "logits")], |t, v, s| {
        let labels: Vec<usize> = (0..6).map(|r| (r + s as usize) % 4).collect();
        t.cross_entropy(v[0], &labels)
    });
}

#[test]
fn image_ops() {
    check(
        "conv2d",
        |s| vec![normal(&[2, 2, 4, 5], s, "x"), normal(&[3, 2, 3, 3], s, "w"), normal(&[3], s, "b")],
        |t, v, s| {
            let y = t.conv2d(v[0], v[1], v[2])?;
            project(t, y, s)
        },
    );
    check("max_pool2", |s| vec![normal(&[2, 2, 4, 6], s, "x")], |t, v, s| {
        let y = t.max_pool2(v[0])?;
        project(t, y, s)
    });
    check("global_avg_pool", |s| vec![normal(&[2, 3, 4, 4], s, "x")], |t, v, s| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y, s)
    });
}

#[test]
fn attention_and_tsf() {
    check(
        "attention, 2 heads",
        |s| vec![normal(&[3, 4], s, "q"), normal(&[5, 4], s, "k"), normal(&[5, 4], s, "v")],
        |t, v, s| {
            let y = attention::attention(t, v[0], v[1], v[2], 2, false)?;
            project(t, y, s)
        },
    );
    // f, theta and all FFN parameters are checked together.
    check(
        "tsf_forward",
        |s| {
            let p = common::random_ffn(6, 5, s);
            vec![
                normal(&[6, 3, 3], s, "f"),
                normal(&[4, 6], s, "theta"),
                p.w1, p.b1, p.w2, p.b2, p.norm1_gain, p.norm1_bias, p.norm2_gain, p.norm2_bias,
            ]
        },
        |t, v, s| {
            let ffn = FfnVars {
                w1: v[2],
                b1: v[3],
                w2: v[4],
                b2: v[5],
                norm1_gain: v[6],
                norm1_bias: v[7],
                norm2_gain: v[8],
                norm2_bias: v[9],
            };
            let y = attention::tsf_forward(t, v[0], v[1], Some(&ffn), 1)?;
            project(t, y, s)
        },
    );
}
