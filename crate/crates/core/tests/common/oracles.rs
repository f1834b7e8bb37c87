//! Literal per-element implementations of the LSTM and attention equations.

use rand::Rng;

use quakecast::attention::attention_forward;
use quakecast::autodiff::{Tape, Tensor};
use quakecast::recurrent::{lstm_cell_step, lstm_forward, LstmVars};

pub const TOL: f64 = 1e-12;

fn sigma(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `W: (hidden, hidden + input)` row-major, acting on `[h, x]`.
fn affine(w: &[f64], b: &[f64], h: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = h.len() + x.len();
    (0..b.len())
        .map(|j| {
            let row = &w[j * cols..(j + 1) * cols];
            let mut z = b[j];
            for (k, v) in h.iter().chain(x).enumerate() {
                z += row[k] * v;
            }
            z
        })
        .collect()
}

struct Gates {
    w: [Vec<f64>; 4],
    b: [Vec<f64>; 4],
}

/// One step for one sample.
fn literal_step(g: &Gates, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let f: Vec<f64> = affine(&g.w[0], &g.b[0], h, x).into_iter().map(sigma).collect();
    let i: Vec<f64> = affine(&g.w[1], &g.b[1], h, x).into_iter().map(sigma).collect();
    let cand: Vec<f64> = affine(&g.w[2], &g.b[2], h, x).into_iter().map(f64::tanh).collect();
    let o: Vec<f64> = affine(&g.w[3], &g.b[3], h, x).into_iter().map(sigma).collect();
    let c_new: Vec<f64> = (0..c.len()).map(|j| f[j] * c[j] + i[j] * cand[j]).collect();
    let h_new = (0..c.len()).map(|j| o[j] * c_new[j].tanh()).collect();
    (h_new, c_new)
}

fn random_gates(r: &mut rand_chacha::ChaCha8Rng, input: usize, hidden: usize) -> Gates {
    let mut w = |n| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let ws = [0; 4].map(|_| w(hidden * (hidden + input)));
    let bs = [0; 4].map(|_| w(hidden));
    Gates { w: ws, b: bs }
}

fn bind_gates(tape: &mut Tape, g: &Gates, input: usize, hidden: usize) -> LstmVars {
    LstmVars {
        weights: [0, 1, 2, 3].map(|k| tape.constant(Tensor::new([hidden, hidden + input], g.w[k].clone()).unwrap())),
        biases: [0, 1, 2, 3].map(|k| tape.constant(Tensor::new([hidden], g.b[k].clone()).unwrap())),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst deviation of the tape LSTM step from the literal one over `cases`
/// random inputs.
pub fn lstm_step_deviation(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = super::rng(seed);
        let (batch, input, hidden) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
        let g = random_gates(&mut r, input, hidden);
        let mut v = |n| (0..n).map(|_| r.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (x, h, c) = (v(batch * input), v(batch * hidden), v(batch * hidden));

        let mut tape = Tape::new();
        let p = bind_gates(&mut tape, &g, input, hidden);
        let xv = tape.constant(Tensor::new([batch, input], x.clone()).unwrap());
        let hv = tape.constant(Tensor::new([batch, hidden], h.clone()).unwrap());
        let cv = tape.constant(Tensor::new([batch, hidden], c.clone()).unwrap());
        let (h1, c1) = lstm_cell_step(&mut tape, xv, hv, cv, &p).unwrap();
        for s in 0..batch {
            let (he, ce) = literal_step(
                &g,
                &x[s * input..(s + 1) * input],
                &h[s * hidden..(s + 1) * hidden],
                &c[s * hidden..(s + 1) * hidden],
            );
            worst = worst.max(max_diff(&tape.value(h1).data()[s * hidden..(s + 1) * hidden], &he));
            worst = worst.max(max_diff(&tape.value(c1).data()[s * hidden..(s + 1) * hidden], &ce));
        }
    }
    worst
}

/// Same for the unrolled sequence version in both directions.
pub fn lstm_sequence_deviation(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = super::rng(10_000 + seed);
        let (batch, time, input, hidden) = (r.gen_range(1..3), r.gen_range(1..6), r.gen_range(1..4), r.gen_range(1..4));
        let g = random_gates(&mut r, input, hidden);
        let x: Vec<f64> = (0..batch * time * input).map(|_| r.gen_range(-2.0..2.0)).collect();
        for reverse in [false, true] {
            let mut tape = Tape::new();
            let p = bind_gates(&mut tape, &g, input, hidden);
            let xv = tape.constant(Tensor::new([batch, time, input], x.clone()).unwrap());
            let out = lstm_forward(&mut tape, xv, &p, reverse).unwrap();
            let got = tape.value(out).data();
            for s in 0..batch {
                let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
                let steps: Vec<usize> = if reverse { (0..time).rev().collect() } else { (0..time).collect() };
                for t in steps {
                    let xt = &x[(s * time + t) * input..(s * time + t + 1) * input];
                    (h, c) = literal_step(&g, xt, &h, &c);
                    let at = (s * time + t) * hidden;
                    worst = worst.max(max_diff(&got[at..at + hidden], &h));
                }
            }
        }
    }
    worst
}

/// Literal attention for one sample: `h` is `(time, hidden)` row-major.
fn literal_attention(h: &[f64], time: usize, w: &[f64], b: f64) -> (Vec<f64>, Vec<f64>) {
    let hidden = w.len();
    let scores: Vec<f64> = (0..time)
        .map(|t| {
            let ht = &h[t * hidden..(t + 1) * hidden];
            (ht.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b).tanh()
        })
        .collect();
    let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let context = (0..hidden)
        .map(|j| (0..time).map(|t| weights[t] * h[t * hidden + j]).sum())
        .collect();
    (context, weights)
}

pub fn attention_deviation(cases: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let mut r = super::rng(20_000 + seed);
        let (batch, time, hidden) = (r.gen_range(1..4), r.gen_range(1..9), r.gen_range(1..6));
        let h: Vec<f64> = (0..batch * time * hidden).map(|_| r.gen_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..hidden).map(|_| r.gen_range(-1.5..1.5)).collect();
        let b = r.gen_range(-1.0..1.0);

        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::new([batch, time, hidden], h.clone()).unwrap());
        let wv = tape.constant(Tensor::new([1, hidden], w.clone()).unwrap());
        let bv = tape.constant(Tensor::vector(vec![b]));
        let out = attention_forward(&mut tape, hv, wv, bv).unwrap();
        for s in 0..batch {
            let (ctx, wts) = literal_attention(&h[s * time * hidden..(s + 1) * time * hidden], time, &w, b);
            worst = worst.max(max_diff(&tape.value(out.context).data()[s * hidden..(s + 1) * hidden], &ctx));
            worst = worst.max(max_diff(&tape.value(out.weights).data()[s * time..(s + 1) * time], &wts));
        }
    }
    worst
}
