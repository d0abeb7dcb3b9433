//! Central finite-difference verification of tape gradients.

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameter id under which the probed point is registered.
pub const PROBE_PARAM: ParamId = usize::MAX;

/// One-sided slopes disagreeing by more than this (relative) mark a kink.
const KINK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - central| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where the function is not differentiable within `epsilon`
    /// (relu or max-pool kinks); reported, never counted as failures.
    pub excluded: Vec<usize>,
}

/// Compares the tape gradient of a scalar function at `point` against central
/// differences with step `epsilon`.
///
/// `function` receives a fresh tape and the node holding the (possibly
/// perturbed) point, and must return a scalar node.
pub fn grad_check<F>(function: F, point: &Tensor, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::invalid(
            "grad_check",
            format!("epsilon must lie in (0, 1e-2], got {epsilon}"),
        ));
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.param(PROBE_PARAM, p.clone());
        let out = function(&mut tape, x)?;
        let v = tape.value(out)?;
        if !v.is_scalar() {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let x = tape.param(PROBE_PARAM, point.clone());
    let out = function(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(PROBE_PARAM)
        .expect("probe parameter is always on the tape");
    let f0 = eval(point)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let f_plus = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let f_minus = eval(&probe)?;
        probe.data_mut()[i] = orig;

        let central = (f_plus - f_minus) / (2.0 * epsilon);
        let forward = (f_plus - f0) / epsilon;
        let backward = (f0 - f_minus) / epsilon;
        let a = analytic.data()[i];
        if (forward - backward).abs() / central.abs().max(1.0) > KINK_TOLERANCE {
            report.excluded.push(i);
            continue;
        }
        let err = (a - central).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}
