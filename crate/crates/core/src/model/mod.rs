//! Network assembly for the hybrid forecaster and its ablation baselines.

mod checkpoint;
mod spec;

pub use checkpoint::{Checkpoint, CheckpointTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use spec::{Architecture, ConvSpec, LayerTable, ModelSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Attention;
use crate::autodiff::{Binding, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{flatten, Activation, BatchNorm1d, Conv1d, Dense, Dropout, FlattenMode, MaxPool1d, Mode};
use crate::recurrent::{lstm_forward, BiLstm, LstmCell};

/// Conv → BN → ReLU → max-pool, repeated.
#[derive(Clone, Debug)]
struct FeatureBlock {
    stages: Vec<(Conv1d, BatchNorm1d, MaxPool1d)>,
}

impl FeatureBlock {
    fn new<R: Rng>(store: &mut ParamStore, spec: &ModelSpec, rng: &mut R) -> Self {
        let mut in_ch = 1;
        let stages = spec
            .layers
            .conv
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let conv = Conv1d::new(store, &format!("conv{}", k + 1), in_ch, c.filters, c.kernel, c.stride, rng);
                let bn = BatchNorm1d::new(store, &format!("bn{}", k + 1), c.filters, spec.bn_eps, spec.bn_momentum);
                in_ch = c.filters;
                let pool = MaxPool1d {
                    size: spec.layers.pool_size,
                    stride: spec.pool_stride,
                };
                (conv, bn, pool)
            })
            .collect();
        FeatureBlock { stages }
    }

    fn out_channels(&self) -> usize {
        self.stages.last().map_or(1, |s| s.0.out_channels)
    }

    /// `(batch, 1, W) → (batch, channels, L)`.
    fn forward(&self, store: &mut ParamStore, tape: &mut Tape, bind: &Binding, mut x: Var, mode: Mode) -> Result<Var> {
        for (conv, bn, pool) in &self.stages {
            x = conv.forward(tape, bind, x)?;
            x = bn.forward(store, tape, bind, x, mode)?;
            x = tape.relu(x);
            x = pool.forward(tape, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
enum Network {
    Hybrid {
        features: FeatureBlock,
        recurrent: Vec<BiLstm>,
        attention: Option<Attention>,
        head: Vec<Dense>,
    },
    Cnn {
        features: FeatureBlock,
        head: Vec<Dense>,
    },
    Lstm {
        cells: Vec<LstmCell>,
        head: Vec<Dense>,
    },
    Mlp {
        layers: Vec<Dense>,
    },
}

fn dense_head<R: Rng>(store: &mut ParamStore, widths: &[usize], mut inputs: usize, rng: &mut R) -> Vec<Dense> {
    widths
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let act = if k + 1 == widths.len() { Activation::Linear } else { Activation::Relu };
            let layer = Dense::new(store, &format!("fc{}", k + 1), inputs, w, act, rng);
            inputs = w;
            layer
        })
        .collect()
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(batch, 1)` prediction in scaled space.
    pub prediction: Var,
    /// `(batch, time)` attention weights, for attention models.
    pub attention: Option<Var>,
    pub binding: Binding,
}

/// A built network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    net: Network,
    mode: Mode,
}

/// Attention weights per sample, one row of `time` weights each.
pub type AttentionRows = Vec<Vec<f64>>;

impl Model {
    /// Deterministically initializes a network from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = &spec.layers;
        let head_widths = &t.dense;
        let net = match spec.architecture {
            Architecture::CnnBilstmAm | Architecture::CnnBilstm => {
                let features = FeatureBlock::new(&mut store, spec, &mut rng);
                let mut width = features.out_channels();
                let recurrent = t
                    .recurrent
                    .iter()
                    .enumerate()
                    .map(|(k, &h)| {
                        let layer = BiLstm::new(&mut store, &format!("bilstm{}", k + 1), width, h, spec.combine, &mut rng);
                        width = layer.output_width();
                        layer
                    })
                    .collect();
                let attention = (spec.architecture == Architecture::CnnBilstmAm)
                    .then(|| Attention::new(&mut store, "attention", width, &mut rng));
                let head = dense_head(&mut store, head_widths, width, &mut rng);
                Network::Hybrid {
                    features,
                    recurrent,
                    attention,
                    head,
                }
            }
            Architecture::CnnOnly => {
                let features = FeatureBlock::new(&mut store, spec, &mut rng);
                let flat = features.out_channels() * spec.feature_lengths().last().copied().unwrap_or(spec.window);
                let head = dense_head(&mut store, head_widths, flat, &mut rng);
                Network::Cnn { features, head }
            }
            Architecture::LstmOnly => {
                let mut width = 1;
                let cells = t
                    .recurrent
                    .iter()
                    .enumerate()
                    .map(|(k, &h)| {
                        let cell = LstmCell::new(&mut store, &format!("lstm{}", k + 1), width, h, &mut rng);
                        width = h;
                        cell
                    })
                    .collect();
                let head = dense_head(&mut store, head_widths, width, &mut rng);
                Network::Lstm { cells, head }
            }
            Architecture::Mlp => {
                let mut inputs = spec.window;
                let mut layers: Vec<Dense> = t
                    .mlp_hidden
                    .iter()
                    .enumerate()
                    .map(|(k, &w)| {
                        let l = Dense::new(&mut store, &format!("hidden{}", k + 1), inputs, w, Activation::Sigmoid, &mut rng);
                        inputs = w;
                        l
                    })
                    .collect();
                layers.push(Dense::new(&mut store, "output", inputs, 1, Activation::Linear, &mut rng));
                Network::Mlp { layers }
            }
        };
        Ok(Model {
            spec: spec.clone(),
            params: store,
            net,
            mode: Mode::Train,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Trainable scalar count; independent of mode.
    pub fn count_parameters(&self) -> usize {
        self.params.count_trainable()
    }

    /// Records one forward pass of `x: (batch, window)` on `tape`.
    ///
    /// `rng` drives dropout and is only consulted in train mode.
    pub fn forward<R: Rng + ?Sized>(&mut self, tape: &mut Tape, x: Var, rng: &mut R) -> Result<ForwardOutput> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.spec.window {
            return Err(Error::shape("model input", &s, &[0, self.spec.window]));
        }
        let batch = s[0];
        let mode = self.mode;
        let dropout = Dropout::new(self.spec.dropout)?;
        let binding = self.params.bind(tape);
        let bind = &binding;
        let store = &mut self.params;
        let mut attention_weights = None;

        let prediction = match &self.net {
            Network::Hybrid {
                features,
                recurrent,
                attention,
                head,
            } => {
                let x = tape.reshape(x, &[batch, 1, s[1]])?;
                let feats = features.forward(store, tape, bind, x, mode)?;
                let mut seq = flatten(tape, feats, FlattenMode::Sequence)?;
                for layer in recurrent {
                    seq = layer.forward(tape, bind, seq)?;
                    seq = dropout.forward(tape, seq, mode, rng)?;
                }
                let summary = match attention {
                    Some(att) => {
                        let out = att.forward(tape, bind, seq)?;
                        attention_weights = Some(out.weights);
                        out.context
                    }
                    None => tape.mean_axis(seq, 1)?,
                };
                run_head(tape, bind, head, summary)?
            }
            Network::Cnn { features, head } => {
                let x = tape.reshape(x, &[batch, 1, s[1]])?;
                let feats = features.forward(store, tape, bind, x, mode)?;
                let flat = flatten(tape, feats, FlattenMode::Features)?;
                run_head(tape, bind, head, flat)?
            }
            Network::Lstm { cells, head } => {
                let mut seq = tape.reshape(x, &[batch, s[1], 1])?;
                for cell in cells {
                    seq = lstm_forward(tape, seq, &cell.vars(bind), false)?;
                    seq = dropout.forward(tape, seq, mode, rng)?;
                }
                let time = tape.shape(seq)[1];
                let hidden = tape.shape(seq)[2];
                let last = tape.slice(seq, 1, time - 1, time)?;
                let last = tape.reshape(last, &[batch, hidden])?;
                run_head(tape, bind, head, last)?
            }
            Network::Mlp { layers } => run_head(tape, bind, layers, x)?,
        };
        Ok(ForwardOutput {
            prediction,
            attention: attention_weights,
            binding,
        })
    }

    /// Eval-mode predictions for row-major `(n, window)` inputs, processed in
    /// chunks of `batch`. Also returns attention weights `(n, time)` when the
    /// network has them.
    pub fn predict(&mut self, inputs: &[f64], batch: usize) -> Result<(Vec<f64>, Option<AttentionRows>)> {
        let w = self.spec.window;
        if inputs.is_empty() || inputs.len() % w != 0 {
            return Err(Error::shape("predict inputs", &[inputs.len()], &[w]));
        }
        let previous = self.mode;
        self.mode = Mode::Eval;
        let n = inputs.len() / w;
        let mut preds = Vec::with_capacity(n);
        let mut weights: Option<Vec<Vec<f64>>> = None;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result = (|| {
            for chunk in inputs.chunks(batch.max(1) * w) {
                let mut tape = Tape::new();
                let x = tape.constant(Tensor::new([chunk.len() / w, w], chunk.to_vec())?);
                let out = self.forward(&mut tape, x, &mut rng)?;
                preds.extend_from_slice(tape.value(out.prediction).data());
                if let Some(a) = out.attention {
                    let t = tape.value(a);
                    let steps = t.shape()[1];
                    weights
                        .get_or_insert_with(Vec::new)
                        .extend(t.data().chunks(steps).map(<[f64]>::to_vec));
                }
            }
            Ok(())
        })();
        self.mode = previous;
        result.map(|_| (preds, weights))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(self)
    }

    /// Loads tensors from a checkpoint written for an identical spec.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.check_header()?;
        if ck.spec != self.spec {
            return Err(Error::Version("checkpoint was written for a different model spec".into()));
        }
        self.params.load_values(
            ck.tensors
                .iter()
                .map(|t| Ok((t.name.as_str(), Tensor::new(t.shape.clone(), t.values.clone())?)))
                .collect::<Result<Vec<_>>>()?,
        )
    }

    /// Rebuilds a model from a checkpoint alone.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.check_header()?;
        let mut model = Model::build(&ck.spec, 0)?;
        model.load_checkpoint(ck)?;
        model.mode = Mode::Eval;
        Ok(model)
    }
}

fn run_head(tape: &mut Tape, bind: &Binding, layers: &[Dense], mut x: Var) -> Result<Var> {
    for layer in layers {
        x = layer.forward(tape, bind, x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_window_for_pool_variants() {
        let mut spec = ModelSpec::new(Architecture::CnnBilstmAm);
        assert_eq!(spec.min_window(), 2);
        spec.pool_stride = 2;
        assert_eq!(spec.min_window(), 9);
        assert_eq!(spec.feature_lengths(), vec![12, 6, 3, 2, 1]);
        spec.window = 8;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("minimum window is 9"), "{err}");
    }

    #[test]
    fn wrong_input_width_is_shape_error() {
        let mut spec = ModelSpec::new(Architecture::Mlp);
        spec.window = 6;
        let mut model = Model::build(&spec, 1).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 5]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(model.forward(&mut tape, x, &mut rng), Err(Error::Shape { .. })));
    }

    #[test]
    fn default_parameter_counts() {
        let count = |a| Model::build(&ModelSpec::new(a), 0).unwrap().count_parameters();
        assert_eq!(count(Architecture::CnnBilstmAm), 397_526);
        assert_eq!(count(Architecture::CnnBilstm), 397_526 - 65);
    }
}
