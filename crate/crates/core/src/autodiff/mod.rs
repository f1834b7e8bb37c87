//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Forward computations are recorded on a [`Tape`]; [`Tape::backward`] then
//! walks the tape in reverse, accumulating gradients into every leaf created
//! with `requires_grad`. Model weights live in a [`ParamStore`] and are bound
//! onto a fresh tape for each forward pass.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{Binding, Param, ParamId, ParamStore};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;

