//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is used to verify.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; coordinates whose gradients are
/// both below this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a| + |n|, FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(FLOOR)
}

/// Outcome of checking one input tensor.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub input: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares backward-pass gradients of a scalar function against central
/// differences for every element of every input.
///
/// `f` receives a fresh tape and the input variables (all gradient-tracking)
/// and must return a scalar.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<Vec<CheckReport>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().expect("scalar objective"))
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (k, grads) in analytic.iter().enumerate() {
        let mut report = CheckReport {
            input: k,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grads[i], numeric);
            if err > report.max_rel_error || i == 0 {
                report = CheckReport {
                    input: k,
                    max_rel_error: err,
                    worst_index: i,
                    analytic: grads[i],
                    numeric,
                };
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Largest relative error across all reports.
pub fn worst(reports: &[CheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

/// Contracts a tensor to a scalar with fixed pseudo-random weights so every
/// output element contributes a distinct sensitivity.
pub fn project(tape: &mut Tape, v: Var, salt: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let weights = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}
