mod common;

use quakecast::autodiff::{Tape, Tensor};
use quakecast::gradcheck::{self, project, STEP};
use quakecast::model::Architecture;

#[test]
fn layer_gradients_match_finite_differences() {
    for seed in 0..25 {
        for (name, err) in common::layer_checks(seed).unwrap() {
            assert!(err <= 1e-4, "{name} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn every_architecture_backpropagates_end_to_end() {
    for arch in Architecture::ALL {
        for seed in 0..3 {
            let err = common::model_check(arch, seed).unwrap();
            assert!(err <= 1e-3, "{arch} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn elementwise_and_shape_ops() {
    let mut r = common::rng(11);
    let inputs = [
        common::tensor(&mut r, &[2, 3, 4], 1.0),
        common::tensor(&mut r, &[3, 1], 1.0),
        common::tensor(&mut r, &[4, 3], 1.0),
    ];
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let a = t.add(v[0], v[1])?;
        let b = t.mul(a, v[1])?;
        let shifted = t.scale(v[1], 0.5);
        let c = t.div(b, shifted)?;
        let d = t.sub(c, v[0])?;
        let e = t.permute(d, &[1, 0, 2])?;
        let f = t.reshape(e, &[6, 4])?;
        let g = t.matmul(f, v[2])?;
        let h = t.softmax(g, 1)?;
        let s = t.slice(h, 0, 1, 5)?;
        let k = t.transpose(v[2])?;
        let m = t.matmul(s, k)?;
        let cat = t.concat(&[m, s], 1)?;
        let red = t.mean_axis(cat, 0)?;
        let sig = t.sigmoid(red);
        project(t, sig, 3)
    })
    .unwrap();
    assert!(gradcheck::worst(&rep) <= 1e-4, "{rep:?}");
}

#[test]
fn shared_subexpressions_accumulate() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.5, -2.0]));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    let s = tape.sum(z);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0, -3.0]);
}
