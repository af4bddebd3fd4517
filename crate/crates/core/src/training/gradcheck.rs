//! Central finite-difference check of the analytic projector gradients.

use super::{evaluate_objective, IntraForm, ObjectiveWeights, QuadBatch, TrainConfig};
use crate::error::{Error, Result};
use crate::projector::ProjectorParams;

/// Relative step: `h = REL_STEP * max(|theta|, 0.1)`.
pub const REL_STEP: f64 = 1e-3;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose perturbation flipped a rectifier, where the central
    /// difference straddles a kink and is not a valid reference.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// `(tensor index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn set_param(pp: &mut ProjectorParams, tensor: usize, index: usize, value: f64) {
    let mut t = 0;
    pp.visit_params_mut(|_, p| {
        if t == tensor {
            p[index] = value;
        }
        t += 1;
    });
}

/// Compares every analytic gradient entry with a central difference of the
/// objective value. `stride` > 1 checks every `stride`-th entry only.
pub fn check(
    pp: &ProjectorParams,
    batch: &QuadBatch,
    weights: &ObjectiveWeights,
    tau2: f64,
    form: IntraForm,
    stride: usize,
) -> Result<GradCheckReport> {
    let base = evaluate_objective(pp, batch, weights, tau2, form)?;
    let pattern = base.relu_pattern();
    let analytic = base.grads.flat();
    let params = pp.flat_params();
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = pp.clone();
    let mut k = 0usize;
    for (t, tensor) in params.iter().enumerate() {
        for (i, &theta) in tensor.iter().enumerate() {
            k += 1;
            if !(k - 1).is_multiple_of(stride.max(1)) {
                continue;
            }
            let h = REL_STEP * theta.abs().max(0.1);
            set_param(&mut probe, t, i, theta + h);
            let plus = evaluate_objective(&probe, batch, weights, tau2, form)?;
            set_param(&mut probe, t, i, theta - h);
            let minus = evaluate_objective(&probe, batch, weights, tau2, form)?;
            set_param(&mut probe, t, i, theta);
            if plus.relu_pattern() != pattern || minus.relu_pattern() != pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * h);
            let err = relative_error(analytic[t][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((t, i, analytic[t][i], numeric));
            }
        }
    }
    Ok(report)
}

/// Used by the training loop when `grad_check` is set: checks a subsample of
/// the first batch and fails if any entry exceeds the tolerance.
pub(crate) fn assert_batch(
    pp: &ProjectorParams,
    batch: &QuadBatch,
    weights: &ObjectiveWeights,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = batch.len().min(16);
    let idx: Vec<usize> = (0..n).collect();
    let small = QuadBatch {
        leaf_nonoverlap: batch.leaf_nonoverlap.select(ndarray::Axis(0), &idx),
        leaf_overlap: batch.leaf_overlap.select(ndarray::Axis(0), &idx),
        base_overlap: batch.base_overlap.select(ndarray::Axis(0), &idx),
        base_nonoverlap: batch.base_nonoverlap.select(ndarray::Axis(0), &idx),
    };
    let total: usize = pp.flat_params().iter().map(Vec::len).sum();
    let stride = (total / 2000).max(1);
    let r = check(pp, &small, weights, cfg.tau2, cfg.intra_form, stride)?;
    if r.max_rel_error > REL_TOLERANCE {
        return Err(Error::Invalid(format!(
            "gradient check failed: max relative error {:.3e} at {:?}",
            r.max_rel_error, r.worst
        )));
    }
    Ok(())
}
