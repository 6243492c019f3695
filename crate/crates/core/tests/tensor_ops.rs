mod common;

use proptest::prelude::*;
use tsf_core::{Error, Tape, Tensor};

fn run_matmul(a: Tensor, b: Tensor) -> tsf_core::Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(a, b)?;
    Ok(tape.value(c).clone())
}

fn run_softmax(x: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(x);
    let y = tape.softmax(x).unwrap();
    tape.value(y).clone()
}

#[test]
fn matmul_identity_and_selector() {
    let m = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
    assert_eq!(run_matmul(Tensor::identity(2), m.clone()).unwrap(), m);
    let sel = Tensor::from_rows(&[&[1.0, 0.0]]).unwrap();
    let col = Tensor::from_rows(&[&[5.0], &[7.0]]).unwrap();
    assert_eq!(run_matmul(sel, col).unwrap().data(), &[5.0]);
}

#[test]
fn matmul_matches_loop_oracle() {
    for seed in 0..20 {
        let a = common::normal(&[3, 4], seed, "a");
        let b = common::normal(&[4, 2], seed, "b");
        let got = run_matmul(a.clone(), b.clone()).unwrap();
        let want = common::matmul(a.data(), b.data(), 3, 4, 2);
        assert!(common::max_diff(got.data(), &want) < 1e-12);
    }
    // Sizes that cross the row-blocking boundary.
    for (m, k, p) in [(1, 1, 1), (4, 3, 5), (7, 9, 3), (13, 2, 17)] {
        let a = common::normal(&[m, k], 5, "a");
        let b = common::normal(&[k, p], 5, "b");
        let got = run_matmul(a.clone(), b.clone()).unwrap();
        assert!(common::max_diff(got.data(), &common::matmul(a.data(), b.data(), m, k, p)) < 1e-12);
    }
}

#[test]
fn batched_matmul_matches_per_slice_oracle() {
    let a = common::normal(&[3, 5, 4], 1, "a");
    let b = common::normal(&[3, 4, 6], 1, "b");
    let got = run_matmul(a.clone(), b.clone()).unwrap();
    for i in 0..3 {
        let want = common::matmul(&a.data()[i * 20..(i + 1) * 20], &b.data()[i * 24..(i + 1) * 24], 5, 4, 6);
        assert!(common::max_diff(&got.data()[i * 30..(i + 1) * 30], &want) < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = run_matmul(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn conv_matches_loop_oracle() {
    for seed in 0..20 {
        let x = common::normal(&[2, 3, 5, 6], seed, "x");
        let w = common::normal(&[4, 3, 3, 3], seed, "w");
        let b = common::normal(&[4], seed, "b");
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 5, 6]);
        assert!(common::max_diff(tape.value(y).data(), &common::conv3x3(&x, &w, &b)) < 1e-12);
    }
}

#[test]
fn softmax_examples() {
    let half = run_softmax(Tensor::from_rows(&[&[1.0, 1.0]]).unwrap());
    assert_eq!(half.data(), &[0.5, 0.5]);
    let q = run_softmax(Tensor::from_rows(&[&[0.0, 3f64.ln()]]).unwrap());
    assert!(common::max_diff(q.data(), &[0.25, 0.75]) < 1e-15);
    let ones = run_softmax(Tensor::from_rows(&[&[-3.0], &[0.0], &[1e3]]).unwrap());
    assert_eq!(ones.data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn softmax_survives_large_logits() {
    let y = run_softmax(Tensor::from_rows(&[&[1000.0, 1000.0, -1000.0]]).unwrap());
    assert!(common::max_diff(y.data(), &[0.5, 0.5, 0.0]) < 1e-15);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 4), 1..6),
        shift in -100.0f64..100.0,
    ) {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = Tensor::from_rows(&refs).unwrap();
        let y = run_softmax(x.clone());
        for row in y.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        let shifted = Tensor::new(x.shape(), x.data().iter().map(|v| v + shift).collect()).unwrap();
        let ys = run_softmax(shifted);
        prop_assert!(common::max_diff(y.data(), ys.data()) < 1e-12);
    }

    #[test]
    fn matmul_agrees_with_oracle(m in 1usize..7, k in 1usize..7, p in 1usize..7, seed in 0u64..1000) {
        let a = common::normal(&[m, k], seed, "a");
        let b = common::normal(&[k, p], seed, "b");
        let got = run_matmul(a.clone(), b.clone()).unwrap();
        prop_assert!(common::max_diff(got.data(), &common::matmul(a.data(), b.data(), m, k, p)) < 1e-12);
    }

    #[test]
    fn tensor_rejects_non_finite(bad in prop::sample::select(vec![f64::NAN, f64::INFINITY, f64::NEG_INFINITY])) {
        prop_assert!(Tensor::new(&[2], vec![1.0, bad]).is_err());
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.param(common::normal(&[2, 2], 1, "x"));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_of_square() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_rows(&[&[3.0]]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_contract() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2], 1.0));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.backward(s).is_err(), "second backward must be rejected");

    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[2], 1.0));
    let s = tape.sum(c).unwrap();
    assert!(tape.backward(s).unwrap().is_empty());
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.param(common::normal(&[3, 4], 9, "x"));
        let w = tape.param(common::normal(&[4, 2], 9, "w"));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.softmax(y).unwrap();
        let l = common::project(&mut tape, y, 3).unwrap();
        let g = tape.backward(l).unwrap();
        (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn reshape_moves_the_buffer() {
    let t = common::normal(&[2, 6], 1, "t");
    let ptr = t.data().as_ptr();
    let r = t.reshape(&[3, 4]).unwrap();
    assert_eq!(r.data().as_ptr(), ptr);
    assert!(r.reshape(&[5]).is_err());
}

#[test]
fn ops_reject_bad_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.slice(a, 1, 2, 2).is_err());
    assert!(tape.concat(&[a, b], 0).is_err());
    assert!(tape.reshape(a, &[4]).is_err());
    let neg = tape.constant(Tensor::from_rows(&[&[-1.0]]).unwrap());
    assert!(tape.ln(neg).is_err());
    let logits = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(tape.cross_entropy(logits, &[0, 3]).is_err());
    assert!(tape.cross_entropy(logits, &[0]).is_err());
}

#[test]
fn pooling_and_norm_values() {
    let mut tape = Tape::new();
    let x = tape.constant(
        Tensor::new(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0]).unwrap(),
    );
    let p = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(p).data(), &[5.0, 8.0]);
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(g).data(), &[3.0]);

    let row = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0, 6.0]]).unwrap());
    let ln = tape.layer_norm(row).unwrap();
    assert!(common::max_diff(tape.value(ln).data(), &common::layer_norm_row(&[1.0, 2.0, 3.0, 6.0])) < 1e-12);
    let ce_logits = tape.constant(Tensor::from_rows(&[&[0.0, 0.0], &[2.0, -1.0]]).unwrap());
    let ce = tape.cross_entropy(ce_logits, &[1, 0]).unwrap();
    let want = common::cross_entropy(&[0.0, 0.0, 2.0, -1.0], 2, &[1, 0]);
    assert!((tape.value(ce).data()[0] - want).abs() < 1e-12);
}
