//! Feed-forward blocks: 1-D convolution, max pooling, batch normalization,
//! dropout, dense and flatten.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Same-padded 1-D convolution (cross-correlation).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    /// Glorot-uniform weights of shape `(out, in, kernel)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let bound = glorot_bound(in_channels * kernel_size, out_channels * kernel_size);
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_channels, in_channels, kernel_size], bound),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]), true);
        Conv1d {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            weight,
            bias,
        }
    }

    /// `(batch, in_channels, len) → (batch, out_channels, ceil(len / stride))`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 3 || s[1] != self.in_channels {
            return Err(Error::shape("conv1d input", s, &[0, self.in_channels, 0]));
        }
        tape.conv1d(x, bind.var(self.weight), bind.var(self.bias), self.stride)
    }

    pub fn parameter_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size + self.out_channels
    }
}

/// Same-padded max pooling along the last axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool1d {
    pub size: usize,
    pub stride: usize,
}

impl MaxPool1d {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.max_pool1d(x, self.size, self.stride)
    }
}

/// Batch normalization over `(batch, channels[, len])` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub eps: f64,
    /// Weight kept on the old running value at each update.
    pub momentum: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        assert!(eps > 0.0, "batch norm eps must be positive");
        assert!(momentum > 0.0 && momentum < 1.0, "batch norm momentum must lie in (0, 1)");
        BatchNorm1d {
            channels,
            eps,
            momentum,
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full([channels], 1.0), false),
        }
    }

    /// Train mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates.
    pub fn forward(&self, store: &mut ParamStore, tape: &mut Tape, bind: &Binding, x: Var, mode: Mode) -> Result<Var> {
        let (gamma, beta) = (bind.var(self.gamma), bind.var(self.beta));
        match mode {
            Mode::Train => {
                if tape.shape(x)[0] < 2 {
                    return Err(Error::Domain(format!(
                        "train-mode batch norm needs batch ≥ 2, got {}",
                        tape.shape(x)[0]
                    )));
                }
                let (y, stats) = tape.batch_norm(x, gamma, beta, self.eps, None)?;
                let stats = stats.expect("train mode yields batch statistics");
                let m = self.momentum;
                let rm = store.get_mut(self.running_mean).value.data_mut();
                rm.iter_mut().zip(&stats.mean).for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
                let rv = store.get_mut(self.running_var).value.data_mut();
                rv.iter_mut().zip(&stats.var).for_each(|(r, b)| *r = m * *r + (1.0 - m) * b);
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).value.data();
                let var = store.get(self.running_var).value.data();
                Ok(tape.batch_norm(x, gamma, beta, self.eps, Some((mean, var)))?.0)
            }
        }
    }
}

/// Inverted dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} must lie in [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    /// Train mode zeroes each element with probability `rate` and scales the
    /// survivors by `1 / (1 − rate)`; eval mode is the identity.
    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        if mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < self.rate { 0.0 } else { 1.0 / keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Fully connected layer `y = act(x·W + b)` with `W: (in, out)`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[inputs, outputs], glorot_bound(inputs, outputs)),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([outputs]), true);
        Dense {
            inputs,
            outputs,
            activation,
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        dense_forward(tape, x, bind.var(self.weight), bind.var(self.bias), self.activation)
    }

    pub fn parameter_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// `act(x·W + b)` for `x: (batch, in)`, `W: (in, out)`, `b: (out)`.
pub fn dense_forward(tape: &mut Tape, x: Var, w: Var, b: Var, activation: Activation) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let z = tape.add(xw, b)?;
    Ok(activation.apply(tape, z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlattenMode {
    /// `(batch, ...) → (batch, features)`.
    Features,
    /// `(batch, channels, len) → (batch, len, channels)`: keeps the time
    /// axis for a recurrent layer.
    Sequence,
}

pub fn flatten(tape: &mut Tape, x: Var, mode: FlattenMode) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    match mode {
        FlattenMode::Features => {
            let features = s[1..].iter().product();
            tape.reshape(x, &[s[0], features])
        }
        FlattenMode::Sequence => {
            if s.len() != 3 {
                return Err(Error::shape("flatten (sequence)", &s, &[0, 0, 0]));
            }
            tape.permute(x, &[0, 2, 1])
        }
    }
}
