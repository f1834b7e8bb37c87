//! LSTM cell, unrolled LSTM and the bidirectional wrapper.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::uniform;

/// Gate order used everywhere a gate index appears.
pub const GATES: [&str; 4] = ["f", "i", "c", "o"];

/// Parameters of one LSTM cell. Every gate weight has shape
/// `(hidden, hidden + input)` and acts on the concatenation `[h_{t−1}, x_t]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_size: usize,
    pub hidden_size: usize,
    /// Forget, input, candidate, output.
    pub weights: [ParamId; 4],
    pub biases: [ParamId; 4],
}

/// Tape handles for one cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub weights: [Var; 4],
    pub biases: [Var; 4],
}

impl LstmCell {
    /// Uniform `±1/√hidden` initialization with the forget bias set to 1.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input_size: usize, hidden_size: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden_size as f64).sqrt();
        let weights = GATES.map(|g| {
            store.add(
                format!("{name}.w_{g}"),
                uniform(rng, &[hidden_size, hidden_size + input_size], bound),
                true,
            )
        });
        let biases = GATES.map(|g| {
            let init = if g == "f" {
                Tensor::full([hidden_size], 1.0)
            } else {
                uniform(rng, &[hidden_size], bound)
            };
            store.add(format!("{name}.b_{g}"), init, true)
        });
        LstmCell {
            input_size,
            hidden_size,
            weights,
            biases,
        }
    }

    pub fn vars(&self, bind: &Binding) -> LstmVars {
        LstmVars {
            weights: self.weights.map(|p| bind.var(p)),
            biases: self.biases.map(|p| bind.var(p)),
        }
    }

    pub fn parameter_count(&self) -> usize {
        4 * (self.hidden_size * (self.hidden_size + self.input_size) + self.hidden_size)
    }
}

/// One step of the cell, written gate by gate:
///
/// ```text
/// f = σ(W_f·[h, x] + b_f)      i = σ(W_i·[h, x] + b_i)
/// ĉ = tanh(W_c·[h, x] + b_c)   o = σ(W_o·[h, x] + b_o)
/// c' = f ⊙ c + i ⊙ ĉ           h' = o ⊙ tanh(c')
/// ```
///
/// `x_t: (batch, input)`, `h_prev`, `c_prev: (batch, hidden)`.
pub fn lstm_cell_step(tape: &mut Tape, x_t: Var, h_prev: Var, c_prev: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let hx = tape.concat(&[h_prev, x_t], 1)?;
    let mut pre = Vec::with_capacity(4);
    for k in 0..4 {
        let wt = tape.transpose(p.weights[k])?;
        let z = tape.matmul(hx, wt)?;
        pre.push(tape.add(z, p.biases[k])?);
    }
    let f = tape.sigmoid(pre[0]);
    let i = tape.sigmoid(pre[1]);
    let cand = tape.tanh(pre[2]);
    let o = tape.sigmoid(pre[3]);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, cand)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok((h, c))
}

/// Runs a cell over `x: (batch, time, input)` from zero initial state and
/// returns every hidden state as `(batch, time, hidden)`.
///
/// With `reverse` the sequence is consumed last-to-first, and the outputs
/// are still indexed by input time.
pub fn lstm_forward(tape: &mut Tape, x: Var, cell: &LstmVars, reverse: bool) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("lstm input", &s, &[0, 0, 0]));
    }
    let (batch, time, input) = (s[0], s[1], s[2]);
    if time == 0 {
        return Err(Error::Domain("lstm needs at least one time step".into()));
    }
    let wshape = tape.shape(cell.weights[0]).to_vec();
    if wshape.len() != 2 || wshape[1] <= wshape[0] || wshape[1] - wshape[0] != input {
        return Err(Error::shape("lstm weights", &wshape, &s));
    }
    let hidden = wshape[0];

    // Stack the four gates so each step needs one recurrent matmul, and
    // project every time step's input at once.
    let w = tape.concat(&cell.weights, 0)?;
    let wt = tape.transpose(w)?;
    let wh = tape.slice(wt, 0, 0, hidden)?;
    let wx = tape.slice(wt, 0, hidden, hidden + input)?;
    let b = tape.concat(&cell.biases, 0)?;
    let flat = tape.reshape(x, &[batch * time, input])?;
    let proj = tape.matmul(flat, wx)?;
    let proj = tape.add(proj, b)?;
    let proj = tape.reshape(proj, &[batch, time, 4 * hidden])?;

    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outputs = vec![None; time];
    let order: Vec<usize> = if reverse { (0..time).rev().collect() } else { (0..time).collect() };
    for t in order {
        let zt = tape.slice(proj, 1, t, t + 1)?;
        let mut z = tape.reshape(zt, &[batch, 4 * hidden])?;
        if let Some(h) = h {
            let rec = tape.matmul(h, wh)?;
            z = tape.add(z, rec)?;
        }
        let gate = |tape: &mut Tape, k: usize| tape.slice(z, 1, k * hidden, (k + 1) * hidden);
        let (zf, zi, zc, zo) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
        let f = tape.sigmoid(zf);
        let i = tape.sigmoid(zi);
        let cand = tape.tanh(zc);
        let o = tape.sigmoid(zo);
        let write = tape.mul(i, cand)?;
        let c_new = match c {
            Some(c) => {
                let keep = tape.mul(f, c)?;
                tape.add(keep, write)?
            }
            None => write,
        };
        let squashed = tape.tanh(c_new);
        let h_new = tape.mul(o, squashed)?;
        outputs[t] = Some(tape.reshape(h_new, &[batch, 1, hidden])?);
        h = Some(h_new);
        c = Some(c_new);
    }
    let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step ran")).collect();
    if outputs.len() == 1 {
        return Ok(outputs[0]);
    }
    tape.concat(&outputs, 1)
}

/// How the two directions of a bidirectional layer are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Elementwise sum; output width = hidden.
    Sum,
    /// Feature concatenation; output width = 2·hidden.
    Concat,
}

impl Combine {
    pub fn output_width(self, hidden: usize) -> usize {
        match self {
            Combine::Sum => hidden,
            Combine::Concat => 2 * hidden,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
    pub combine: Combine,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        combine: Combine,
        rng: &mut R,
    ) -> Self {
        BiLstm {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input_size, hidden_size, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input_size, hidden_size, rng),
            combine,
        }
    }

    pub fn output_width(&self) -> usize {
        self.combine.output_width(self.forward.hidden_size)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        bilstm_forward(tape, x, &self.forward.vars(bind), &self.backward.vars(bind), self.combine)
    }

    pub fn parameter_count(&self) -> usize {
        self.forward.parameter_count() + self.backward.parameter_count()
    }
}

/// `(batch, time, input) → (batch, time, width)` with width set by `combine`.
pub fn bilstm_forward(tape: &mut Tape, x: Var, fwd: &LstmVars, bwd: &LstmVars, combine: Combine) -> Result<Var> {
    let ahead = lstm_forward(tape, x, fwd, false)?;
    let behind = lstm_forward(tape, x, bwd, true)?;
    match combine {
        Combine::Sum => tape.add(ahead, behind),
        Combine::Concat => tape.concat(&[ahead, behind], 2),
    }
}
