//! Central finite-difference gradient verification.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Compares `backward` against central differences for the listed input
/// nodes, returning the maximum relative error. Relative error uses
/// `|fd - analytic| / max(|fd|, |analytic|, 1)` so near-zero gradients do
/// not blow up the ratio.
pub fn finite_diff_check(
    tape: &Tape,
    inputs: &[&Tensor],
    out: NodeId,
    check: &[NodeId],
    h: f32,
) -> Result<f32> {
    if h <= 0.0 {
        return Err(Error::Invalid("finite_diff_check requires h > 0".into()));
    }
    let values = tape.replay(inputs)?;
    let grads = tape.backward_at(&values, out)?;

    let mut max_rel = 0.0f32;
    for &id in check {
        let slot = tape
            .input_slot(id)
            .ok_or_else(|| Error::Invalid("finite_diff_check target is not an input".into()))?;
        let analytic = grads.get_or_zeros(id, inputs[slot].shape());
        for e in 0..inputs[slot].numel() {
            let fd = {
                let mut plus = inputs[slot].clone();
                plus.data_mut()[e] += h;
                let mut minus = inputs[slot].clone();
                minus.data_mut()[e] -= h;
                let f_plus = eval_with(tape, inputs, slot, &plus, out)?;
                let f_minus = eval_with(tape, inputs, slot, &minus, out)?;
                (f_plus - f_minus) / (2.0 * h as f64)
            };
            let an = analytic.data()[e] as f64;
            let denom = fd.abs().max(an.abs()).max(1.0);
            let rel = ((fd - an).abs() / denom) as f32;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn eval_with(
    tape: &Tape,
    inputs: &[&Tensor],
    slot: usize,
    replacement: &Tensor,
    out: NodeId,
) -> Result<f64> {
    let mut swapped: Vec<&Tensor> = inputs.to_vec();
    swapped[slot] = replacement;
    let values = tape.replay_f64(&swapped)?;
    Ok(values[out.index()].data[0])
}
