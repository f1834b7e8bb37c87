#![allow(dead_code)]

pub mod oracles;

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quakecast::attention::attention_forward;
use quakecast::autodiff::{Tape, Tensor, Var};
use quakecast::gradcheck::{self, project, STEP};
use quakecast::layers::{dense_forward, Activation, Dropout, Mode};
use quakecast::model::{Architecture, ConvSpec, LayerTable, Model, ModelSpec};
use quakecast::recurrent::{bilstm_forward, lstm_cell_step, lstm_forward, Combine, LstmVars};
use quakecast::train::mse_loss;
use quakecast::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// One layer-level gradient check: a name and its worst relative error.
pub type LayerCheck = (&'static str, f64);

fn lstm_vars(v: &[Var]) -> LstmVars {
    LstmVars {
        weights: [v[0], v[1], v[2], v[3]],
        biases: [v[4], v[5], v[6], v[7]],
    }
}

fn lstm_params(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Vec<Tensor> {
    let mut p: Vec<Tensor> = (0..4).map(|_| tensor(rng, &[hidden, hidden + input], 0.6)).collect();
    p.extend((0..4).map(|_| tensor(rng, &[hidden], 0.6)));
    p
}

/// Checks every layer once with inputs drawn from `seed`; returns the worst
/// relative error per layer.
pub fn layer_checks(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut r = rng(seed);
    let batch = r.gen_range(2..4);
    let len = r.gen_range(3..8);
    let in_ch = r.gen_range(1..4);
    let out_ch = r.gen_range(1..4);
    let kernel = r.gen_range(1..5);
    let stride = r.gen_range(1..3);
    let mut out = Vec::new();

    let inputs = [
        tensor(&mut r, &[batch, in_ch, len], 1.0),
        tensor(&mut r, &[out_ch, in_ch, kernel], 1.0),
        tensor(&mut r, &[out_ch], 1.0),
    ];
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let y = t.conv1d(v[0], v[1], v[2], stride)?;
        project(t, y, seed)
    })?;
    out.push(("conv1d", gradcheck::worst(&rep)));

    let pool_size = r.gen_range(1..4);
    let inputs = [tensor(&mut r, &[batch, in_ch, len], 1.0)];
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let y = t.max_pool1d(v[0], pool_size, stride)?;
        project(t, y, seed)
    })?;
    out.push(("maxpool", gradcheck::worst(&rep)));

    let inputs = [
        tensor(&mut r, &[batch, in_ch, len], 1.0),
        tensor(&mut r, &[in_ch], 1.5),
        tensor(&mut r, &[in_ch], 1.0),
    ];
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, None)?;
        project(t, y, seed)
    })?;
    out.push(("batchnorm", gradcheck::worst(&rep)));

    let (din, dout) = (r.gen_range(1..5), r.gen_range(1..5));
    let act = [Activation::Linear, Activation::Relu, Activation::Sigmoid, Activation::Tanh][r.gen_range(0..4)];
    let inputs = [
        tensor(&mut r, &[batch, din], 1.0),
        tensor(&mut r, &[din, dout], 1.0),
        tensor(&mut r, &[dout], 1.0),
    ];
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let y = dense_forward(t, v[0], v[1], v[2], act)?;
        project(t, y, seed)
    })?;
    out.push(("dense", gradcheck::worst(&rep)));

    let inputs = [tensor(&mut r, &[batch, din], 1.0)];
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let y = Dropout::new(0.5)?.forward(t, v[0], Mode::Eval, &mut rng(seed))?;
        project(t, y, seed)
    })?;
    out.push(("dropout (eval)", gradcheck::worst(&rep)));

    let (input, hidden) = (r.gen_range(1..4), r.gen_range(1..4));
    let mut inputs = vec![
        tensor(&mut r, &[batch, input], 1.0),
        tensor(&mut r, &[batch, hidden], 1.0),
        tensor(&mut r, &[batch, hidden], 1.0),
    ];
    inputs.extend(lstm_params(&mut r, input, hidden));
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let (h, c) = lstm_cell_step(t, v[0], v[1], v[2], &lstm_vars(&v[3..]))?;
        let ph = project(t, h, seed)?;
        let pc = project(t, c, seed + 1)?;
        t.add(ph, pc)
    })?;
    out.push(("lstm cell", gradcheck::worst(&rep)));

    let time = r.gen_range(1..5);
    let mut inputs = vec![tensor(&mut r, &[batch, time, input], 1.0)];
    inputs.extend(lstm_params(&mut r, input, hidden));
    let reverse = r.gen_bool(0.5);
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let y = lstm_forward(t, v[0], &lstm_vars(&v[1..]), reverse)?;
        project(t, y, seed)
    })?;
    out.push(("lstm (unrolled)", gradcheck::worst(&rep)));

    let mut inputs = vec![tensor(&mut r, &[batch, time, input], 1.0)];
    inputs.extend(lstm_params(&mut r, input, hidden));
    inputs.extend(lstm_params(&mut r, input, hidden));
    let combine = if r.gen_bool(0.5) { Combine::Sum } else { Combine::Concat };
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let y = bilstm_forward(t, v[0], &lstm_vars(&v[1..9]), &lstm_vars(&v[9..17]), combine)?;
        project(t, y, seed)
    })?;
    out.push(("bilstm", gradcheck::worst(&rep)));

    let inputs = [
        tensor(&mut r, &[batch, time, hidden], 1.0),
        tensor(&mut r, &[1, hidden], 1.0),
        tensor(&mut r, &[1], 1.0),
    ];
    let rep = gradcheck::check(&inputs, STEP, |t, v| {
        let a = attention_forward(t, v[0], v[1], v[2])?;
        let pc = project(t, a.context, seed)?;
        let pw = project(t, a.weights, seed + 1)?;
        t.add(pc, pw)
    })?;
    out.push(("attention", gradcheck::worst(&rep)));
    Ok(out)
}

/// Small channel widths with the full layer structure.
pub fn tiny_spec(arch: Architecture) -> ModelSpec {
    let conv = |filters, kernel| ConvSpec {
        filters,
        kernel,
        stride: 1,
    };
    let mut spec = ModelSpec::new(arch);
    spec.window = 6;
    spec.layers = LayerTable {
        conv: vec![conv(2, 3), conv(3, 3), conv(3, 2), conv(4, 3)],
        pool_size: 2,
        recurrent: vec![3, 2],
        dense: vec![3, 2, 1],
        mlp_hidden: vec![3, 3],
    };
    spec
}

/// Worst relative error of d(MSE)/dθ over every trainable parameter of a
/// tiny model, in train mode with a fixed dropout mask.
pub fn model_check(arch: Architecture, seed: u64) -> Result<f64> {
    model_check_counting(arch, seed, &mut 0)
}

const KINK_TOL: f64 = 1e-2;
const MIN_STEP: f64 = 1e-7;

/// As [`model_check`], adding to `shrunk` the number of times the step was
/// reduced to avoid a kink.
pub fn model_check_counting(arch: Architecture, seed: u64, shrunk: &mut usize) -> Result<f64> {
    let spec = tiny_spec(arch);
    let mut model = Model::build(&spec, seed)?;
    let mut r = rng(seed ^ 0xA5A5);
    // Zero-initialized biases put dead-ReLU units exactly on the kink, where
    // central differences are meaningless; move every parameter off it.
    for p in model.params_mut().iter_mut().filter(|p| p.trainable) {
        p.value.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
    }
    let batch = 3;
    let x = tensor(&mut r, &[batch, spec.window], 1.0);
    let y: Vec<f64> = (0..batch).map(|_| r.gen_range(0.0..1.0)).collect();
    let loss_of = |model: &mut Model, tape: &mut Tape| -> Result<(Var, quakecast::autodiff::Binding)> {
        let xv = tape.constant(x.clone());
        let out = model.forward(tape, xv, &mut rng(seed))?;
        Ok((mse_loss(tape, out.prediction, &y)?, out.binding))
    };

    let mut tape = Tape::new();
    let (loss, binding) = loss_of(&mut model, &mut tape)?;
    let base = tape.value(loss).data()[0];
    tape.backward(loss)?;
    model.params_mut().zero_grad();
    model.params_mut().collect_grads(&tape, &binding);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let n_params = model.params().len();
    for k in 0..n_params {
        if !model.params().iter().nth(k).unwrap().trainable {
            continue;
        }
        let len = model.params().iter().nth(k).unwrap().value.len();
        for i in 0..len {
            let mut eval = |delta: f64| -> Result<f64> {
                let p = model.params_mut().iter_mut().nth(k).unwrap();
                let orig = p.value.data()[i];
                p.value.data_mut()[i] = orig + delta;
                let mut tape = Tape::new();
                let (loss, _) = loss_of(&mut model, &mut tape)?;
                model.params_mut().iter_mut().nth(k).unwrap().value.data_mut()[i] = orig;
                Ok(tape.value(loss).data()[0])
            };
            let mut step = STEP;
            let numeric = loop {
                let (plus, minus) = (eval(step)?, eval(-step)?);
                let (fwd, bwd) = ((plus - base) / step, (base - minus) / step);
                // One-sided slopes that disagree mean a max-pool or ReLU kink
                // lies inside the step; shrink it rather than difference across.
                if gradcheck::relative_error(fwd, bwd) <= KINK_TOL || step <= MIN_STEP {
                    break (plus - minus) / (2.0 * step);
                }
                step /= 10.0;
                *shrunk += 1;
            };
            worst = worst.max(gradcheck::relative_error(analytic[k][i], numeric));
        }
    }
    Ok(worst)
}

/// Sinusoid with a 12-sample period plus uniform noise, clipped to ≥ 0.
pub fn seasonal_series(n: usize, noise: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let phase = 2.0 * std::f64::consts::PI * i as f64 / 12.0;
            (10.0 + 6.0 * phase.sin() + noise * r.gen_range(-1.0..1.0)).max(0.0)
        })
        .collect()
}

/// A USGS-style catalog with seasonal activity in every region over
/// `months` months starting January 2000, one duplicated row and one
/// malformed row.
pub fn write_synthetic_catalog(path: &Path, months: usize, seed: u64) {
    let mut r = rng(seed);
    let mut text = String::from("time,latitude,longitude,depth,mag,place\n");
    let mut first = None;
    for m in 0..months {
        let (year, month) = (2000 + m / 12, m % 12 + 1);
        for region in 0..9 {
            let phase = 2.0 * std::f64::consts::PI * m as f64 / 12.0 + region as f64;
            let n = (4.0 + 3.0 * phase.sin()).round() as usize + r.gen_range(0..2);
            for _ in 0..n {
                let lat = 23.0 + 22.0 * (2 - region / 3) as f64 / 3.0 + r.gen_range(0.05..7.3);
                let lon = 75.0 + 44.0 * (region % 3) as f64 / 3.0 + r.gen_range(0.05..14.6);
                let row = format!(
                    "{year}-{month:02}-{:02}T{:02}:{:02}:00.000Z,{lat:.3},{lon:.3},{:.1},{:.1},synthetic\n",
                    r.gen_range(1..29),
                    r.gen_range(0..24),
                    r.gen_range(0..60),
                    r.gen_range(5.0..30.0),
                    r.gen_range(3.5..6.5)
                );
                first.get_or_insert_with(|| row.clone());
                text.push_str(&row);
            }
        }
    }
    text.push_str(first.as_deref().unwrap());
    writeln!(text, "not-a-time,30,100,10,4.0,broken").unwrap();
    std::fs::write(path, text).unwrap();
}
