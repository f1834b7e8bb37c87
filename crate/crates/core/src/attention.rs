//! Additive temporal attention: one scalar score per time step, softmax over
//! time, and the weighted sum of hidden states as the context.

use rand::Rng;

use crate::autodiff::{Binding, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::uniform;

#[derive(Clone, Debug)]
pub struct Attention {
    pub hidden: usize,
    /// `(1, hidden)` score weights.
    pub weight: ParamId,
    /// `(1)` score bias.
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `(batch, hidden)`.
    pub context: Var,
    /// `(batch, time)`, each row sums to one.
    pub weights: Var,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Attention {
            hidden,
            weight: store.add(format!("{name}.w_h"), uniform(rng, &[1, hidden], bound), true),
            bias: store.add(format!("{name}.b_h"), Tensor::zeros([1]), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, h: Var) -> Result<AttentionOutput> {
        attention_forward(tape, h, bind.var(self.weight), bind.var(self.bias))
    }

    pub fn parameter_count(&self) -> usize {
        self.hidden + 1
    }
}

/// `s_t = tanh(W_h·h_t + b_h)`, `a = softmax_t(s)`, `context = Σ_t a_t·h_t`
/// for `h: (batch, time, hidden)`.
pub fn attention_forward(tape: &mut Tape, h: Var, w: Var, b: Var) -> Result<AttentionOutput> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("attention input", &s, &[0, 0, 0]));
    }
    let (batch, time, hidden) = (s[0], s[1], s[2]);
    if tape.shape(w) != [1, hidden] {
        return Err(Error::shape("attention weight", tape.shape(w), &[1, hidden]));
    }
    let rows = tape.reshape(h, &[batch * time, hidden])?;
    let wt = tape.transpose(w)?;
    let raw = tape.matmul(rows, wt)?;
    let raw = tape.add(raw, b)?;
    let scores = tape.tanh(raw);
    let scores = tape.reshape(scores, &[batch, time])?;
    let weights = tape.softmax(scores, 1)?;
    let column = tape.reshape(weights, &[batch, time, 1])?;
    let weighted = tape.mul(h, column)?;
    let context = tape.sum_axis(weighted, 1)?;
    Ok(AttentionOutput { context, weights })
}
