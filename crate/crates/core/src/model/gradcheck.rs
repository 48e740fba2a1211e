//! Central finite-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use super::{Mode, Model, ModelError, ModelParams, ParamGroup};
use crate::chunking::ChunkSample;

/// Absolute tolerance for gradients too small to compare relatively.
pub const ZERO_GRADIENT: f64 = 1e-8;

/// Smallest magnitude whose relative error is meaningful. Rounding in two
/// loss evaluations leaves about `1e-16 * |loss| / epsilon` of noise in a
/// central difference, roughly `1e-11` at `epsilon = 1e-5`, so below `1e-6`
/// the relative error measures that noise rather than the gradient.
pub const RESOLVABLE_GRADIENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupError {
    /// Worst `|a - n| / max(|a|, |n|)` over entries of resolvable size.
    pub max_relative: f64,
    /// Worst `|a - n|` over entries where both gradients are below
    /// [`RESOLVABLE_GRADIENT`].
    pub max_small_abs: f64,
    pub checked: usize,
    pub small_entries: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientCheckReport {
    pub groups: BTreeMap<ParamGroup, GroupError>,
}

impl GradientCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.groups.values().map(|g| g.max_relative).fold(0.0, f64::max)
    }

    pub fn max_small_abs_error(&self) -> f64 {
        self.groups.values().map(|g| g.max_small_abs).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance && self.max_small_abs_error() <= ZERO_GRADIENT
    }
}

/// Compares backpropagated gradients with `(f(θ+ε) - f(θ-ε)) / 2ε` for
/// every parameter, in eval mode so dropout is off.
pub fn gradient_check(
    model: &Model,
    params: &ModelParams,
    sample: &ChunkSample,
    label: usize,
    epsilon: f64,
) -> Result<GradientCheckReport, ModelError> {
    gradient_check_in(model, params, sample, label, epsilon, Mode::Eval)
}

/// Same as [`gradient_check`] in any mode; a fixed dropout seed keeps the
/// masks identical across perturbations.
pub fn gradient_check_in(
    model: &Model,
    params: &ModelParams,
    sample: &ChunkSample,
    label: usize,
    epsilon: f64,
    mode: Mode,
) -> Result<GradientCheckReport, ModelError> {
    let (_, analytic) = model.loss_and_gradients(params, sample, label, mode)?;
    compare(model, params, sample, label, epsilon, mode, &analytic)
}

pub(crate) fn compare(
    model: &Model,
    params: &ModelParams,
    sample: &ChunkSample,
    label: usize,
    epsilon: f64,
    mode: Mode,
    analytic: &[f64],
) -> Result<GradientCheckReport, ModelError> {
    let mut report = GradientCheckReport::default();
    let mut probe = params.clone();
    for spec in &model.layout().specs {
        let entry = report.groups.entry(spec.group).or_default();
        for i in spec.tensor.range() {
            let orig = probe.values[i];
            probe.values[i] = orig + epsilon;
            let up = model.loss(&probe, sample, label, mode)?;
            probe.values[i] = orig - epsilon;
            let down = model.loss(&probe, sample, label, mode)?;
            probe.values[i] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            entry.checked += 1;
            if scale < RESOLVABLE_GRADIENT {
                entry.small_entries += 1;
                entry.max_small_abs = entry.max_small_abs.max((a - numeric).abs());
            } else {
                entry.max_relative = entry.max_relative.max((a - numeric).abs() / scale);
            }
        }
    }
    Ok(report)
}
