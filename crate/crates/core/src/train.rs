//! MSE training with Adam, per-epoch linear learning-rate decay and the
//! repeated-run protocol.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Param, ParamStore, Tape, Tensor, Var};
use crate::catalog::RegionId;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{Metrics, Space};
use crate::model::{Architecture, Model, ModelSpec};
use crate::recurrent::Combine;
use crate::series::{Case, PreparedDataset, WindowedDataset, YearMonth};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub repeats: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-4,
            repeats: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if self.batch_size < 2 {
            return bad("batch size must be ≥ 2 for batch normalization");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad("learning rates must satisfy lr_start ≥ lr_end > 0");
        }
        if self.repeats == 0 {
            return bad("repeats must be ≥ 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam constants must satisfy 0 ≤ β < 1 and ε > 0");
        }
        Ok(())
    }
}

/// Linear decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
/// Both endpoints are reproduced exactly.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if config.epochs <= 1 {
        return config.lr_start;
    }
    let f = epoch.min(config.epochs - 1) as f64 / (config.epochs - 1) as f64;
    config.lr_start * (1.0 - f) + config.lr_end * f
}

/// Mean squared error between `pred` and a constant `target` of equal size.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    let shape = tape.shape(pred).to_vec();
    let n: usize = shape.iter().product();
    if n == 0 || target.is_empty() {
        return Err(Error::Domain("mse of empty input".into()));
    }
    if n != target.len() {
        return Err(Error::shape("mse_loss", &shape, &[target.len()]));
    }
    let t = tape.constant(Tensor::new(shape, target.to_vec())?);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// First and second moments for every parameter in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, config: &TrainConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adam state", &[state.m.len()], &[store.len()]));
    }
    for p in store.iter().filter(|p| p.trainable) {
        if let Some(index) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: p.name.clone(),
                index,
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(state.t.min(i32::MAX as u64) as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let Param { value, grad, .. } = p;
        for (((theta, &g), m), v) in value.data_mut().iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Splits a shuffled order into batches of `size`; a final batch shorter
/// than two samples is folded into its predecessor.
pub fn partition_batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(size.max(1)).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() < 2) {
        batches.pop();
        let start = (batches.len() - 1) * size;
        *batches.last_mut().expect("at least one batch") = &order[start..];
    }
    batches
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the batch losses in train mode.
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    /// Test-split metrics in scaled space.
    pub metrics: Metrics,
    /// Eval-mode predictions on the test split, scaled space.
    pub predictions: Vec<f64>,
    /// Per-test-sample attention weights, for attention models.
    pub attention: Option<Vec<Vec<f64>>>,
    pub log: Vec<EpochLog>,
    pub wall_time_secs: f64,
}

/// Trains `model` in place on `train` and scores it on `test`.
///
/// The shuffle and dropout streams are derived from `run_seed`, so the result
/// (apart from wall time) depends only on the model's initial parameters,
/// the data, the config and the seed.
pub fn train_once(
    model: &mut Model,
    train: &WindowedDataset,
    test: &WindowedDataset,
    config: &TrainConfig,
    run_seed: u64,
) -> Result<RunResult> {
    config.validate()?;
    let w = model.spec().window;
    if train.window != w || test.window != w {
        return Err(Error::shape("dataset window", &[train.window, test.window], &[w, w]));
    }
    if train.len() < 2 {
        return Err(Error::Domain("training needs at least two samples".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(1);
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    model.set_mode(Mode::Train);

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in partition_batches(&order, config.batch_size).into_iter().enumerate() {
            let (x, y) = train.gather(batch);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new([batch.len(), w], x)?);
            let out = model.forward(&mut tape, x, &mut rng)?;
            let loss = mse_loss(&mut tape, out.prediction, &y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            params.collect_grads(&tape, &out.binding);
            adam_step(params, &mut state, lr, config)?;
            total += value * batch.len() as f64;
        }
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: total / train.len() as f64,
        });
    }

    model.set_mode(Mode::Eval);
    let (predictions, attention) = model.predict(&test.inputs, config.batch_size)?;
    let metrics = Metrics::compute(&test.targets, &predictions, Space::Scaled)?;
    Ok(RunResult {
        run: 0,
        seed: run_seed,
        final_train_loss: log.last().map_or(f64::NAN, |l| l.train_loss),
        metrics,
        predictions,
        attention,
        log,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Settings echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub architecture: Architecture,
    pub window: usize,
    pub dropout: f64,
    pub combine: Combine,
    pub pool_stride: usize,
    pub split_ratio: f64,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub final_train_loss: f64,
    pub scaled: Metrics,
    pub raw: Metrics,
}

/// Aggregate of all repeats for one (region, case, architecture).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub region: RegionId,
    pub case: Case,
    pub config: ConfigEcho,
    pub test_months: Vec<YearMonth>,
    pub runs: Vec<RunSummary>,
    /// Mean over runs, scaled space.
    pub mean: MetricStats,
    /// Sample standard deviation over runs (0 for a single run).
    pub std: MetricStats,
}

impl EvalReport {
    pub fn write_json<W: Write>(&self, sink: W) -> Result<()> {
        Ok(serde_json::to_writer_pretty(sink, self)?)
    }

    /// `region,case,run,rmse,mae,r2` in scaled space.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["region", "case", "run", "rmse", "mae", "r2"])?;
        for r in &self.runs {
            w.write_record([
                self.region.to_string(),
                self.case.as_str().to_string(),
                r.run.to_string(),
                r.scaled.rmse.to_string(),
                r.scaled.mae.to_string(),
                r.scaled.r2.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_training_log<W: Write>(log: &[EpochLog], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["epoch", "lr", "train_loss"])?;
    for l in log {
        w.write_record([l.epoch.to_string(), l.lr.to_string(), l.train_loss.to_string()])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Everything produced by [`train_protocol`].
#[derive(Debug)]
pub struct ProtocolOutcome {
    pub report: EvalReport,
    pub runs: Vec<RunResult>,
    pub models: Vec<Model>,
}

/// Runs `config.repeats` independent trainings with seeds `seed + i` and
/// aggregates their test metrics. Runs may execute on the current rayon pool;
/// results do not depend on the pool size.
pub fn train_protocol(spec: &ModelSpec, data: &PreparedDataset, config: &TrainConfig) -> Result<ProtocolOutcome> {
    config.validate()?;
    spec.validate()?;
    if spec.window != data.meta.window {
        return Err(Error::Config(format!(
            "model window {} does not match prepared window {}",
            spec.window, data.meta.window
        )));
    }
    let outcomes: Vec<(RunResult, Model)> = (0..config.repeats)
        .into_par_iter()
        .map(|i| {
            let seed = config.seed.wrapping_add(i as u64);
            let mut model = Model::build(spec, seed)?;
            let mut result = train_once(&mut model, &data.train, &data.test, config, seed)?;
            result.run = i;
            Ok((result, model))
        })
        .collect::<Result<_>>()?;
    let (runs, models): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();

    let summaries = runs
        .iter()
        .map(|r| {
            Ok(RunSummary {
                run: r.run,
                seed: r.seed,
                final_train_loss: r.final_train_loss,
                scaled: r.metrics,
                raw: Metrics::raw(&data.test.targets, &r.predictions, &data.meta.scaler)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stat = |f: fn(&Metrics) -> f64| mean_std(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    let (rmse, mae, r2) = (stat(|m| m.rmse), stat(|m| m.mae), stat(|m| m.r2));
    let report = EvalReport {
        region: data.meta.region,
        case: data.meta.case,
        config: ConfigEcho {
            architecture: spec.architecture,
            window: spec.window,
            dropout: spec.dropout,
            combine: spec.combine,
            pool_stride: spec.pool_stride,
            split_ratio: data.meta.split_ratio,
            train: config.clone(),
        },
        test_months: data.test_target_months(),
        runs: summaries,
        mean: MetricStats {
            rmse: rmse.0,
            mae: mae.0,
            r2: r2.0,
        },
        std: MetricStats {
            rmse: rmse.1,
            mae: mae.1,
            r2: r2.1,
        },
    };
    Ok(ProtocolOutcome { report, runs, models })
}
