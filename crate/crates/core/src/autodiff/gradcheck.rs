//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates the forward pass; it never calls
//! [`Tape::backward`] on the perturbed graphs.

use crate::autodiff::{Matrix, NodeId, Tape};
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely rather than relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_entry: usize,
}

/// `|a - b| / max(|a|, |b|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Evaluates `build` once at the given inputs.
pub fn eval_scalar<F>(inputs: &[Matrix], build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|m| tape.leaf(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &ids)?;
    tape.value(out)
        .as_scalar()
        .ok_or_else(|| Error::Contract("gradient check needs a scalar output".into()))
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` for one input entry.
pub fn numeric_partial<F>(inputs: &[Matrix], input: usize, entry: usize, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut plus = inputs.to_vec();
    plus[input].data_mut()[entry] += FD_STEP;
    let mut minus = inputs.to_vec();
    minus[input].data_mut()[entry] -= FD_STEP;
    Ok((eval_scalar(&plus, build)? - eval_scalar(&minus, build)?) / (2.0 * FD_STEP))
}

/// Compares backward-pass gradients against central differences on every input entry.
pub fn check_gradients<F>(inputs: &[Matrix], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|m| tape.leaf(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &ids)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_input: 0,
        worst_entry: 0,
    };
    for (i, (id, m)) in ids.iter().zip(inputs).enumerate() {
        let analytic = grads.get_or_zeros(*id, m.shape());
        for e in 0..m.len() {
            let numeric = numeric_partial(inputs, i, e, &build)?;
            let err = relative_error(analytic.data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = i;
                report.worst_entry = e;
            }
        }
    }
    Ok(report)
}
