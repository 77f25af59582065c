//! Finite-difference gradient verification.
//!
//! Central differences are only meaningful where the function is
//! differentiable across the probe window and where the secant rises above
//! accumulated rounding. Each probe therefore (a) compares the piecewise
//! activation pattern at `x ± eps` against the base point and skips
//! coordinates whose window crosses a kink (the analytic subgradient is
//! still exact there, but the secant is not a derivative estimate), and
//! (b) treats discrepancies inside the secant's arithmetic noise budget
//! (hundreds of ulps of `f` divided by the probe step) as agreement at
//! resolution.

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::rng::SplitMix64;
use crate::Result;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max over probed coordinates of
    /// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_err: f64,
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates skipped because the probe window crossed a ReLU boundary.
    pub skipped: usize,
    /// Compared coordinates per input tensor.
    pub per_input_checked: Vec<usize>,
}

/// Max relative error between the tape gradient of `f` at `point` and
/// central finite differences with step `eps`, over every coordinate.
///
/// `f` must build a scalar from the single input node.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    Ok(grad_check_multi(
        |tape, ids| f(tape, ids[0]),
        std::slice::from_ref(point),
        eps,
        None,
        0,
    )?
    .max_rel_err)
}

/// Multi-input variant of [`grad_check`]. When `coords_per_input` is set,
/// only that many randomly chosen coordinates per input are probed (the
/// analytic gradient is still exact over all of them); useful for large
/// parameter tensors where a full sweep is too slow.
pub fn grad_check_multi<F>(
    f: F,
    points: &[Tensor],
    eps: f64,
    coords_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok((tape.value(out).item(), tape.relu_signature()))
    };

    // Analytic gradients in one pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &ids)?;
    let base_sig = tape.relu_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.wrt(id)).collect();

    let mut rng = SplitMix64::new(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
        per_input_checked: vec![0; points.len()],
    };
    let mut inputs: Vec<Tensor> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        let coords: Vec<usize> = match coords_per_input {
            Some(n) if n < point.len() => (0..n).map(|_| rng.below(point.len())).collect(),
            _ => (0..point.len()).collect(),
        };
        for ci in coords {
            let orig = point.values()[ci];
            inputs[pi] = point.with_value_at(ci, orig + eps);
            let (up, sig_up) = eval(&inputs)?;
            inputs[pi] = point.with_value_at(ci, orig - eps);
            let (down, sig_down) = eval(&inputs)?;
            inputs[pi] = point.clone();
            if sig_up != base_sig || sig_down != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi].values()[ci];
            // The secant difference carries accumulated rounding of order
            // ulp(|f|); discrepancies inside that budget are agreement at
            // arithmetic resolution, not error. Genuine formula bugs move
            // gradients by orders of magnitude more.
            let noise_budget =
                512.0 * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / (2.0 * eps);
            if (a - numeric).abs() > noise_budget {
                report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
            }
            report.checked += 1;
            report.per_input_checked[pi] += 1;
        }
    }
    Ok(report)
}
