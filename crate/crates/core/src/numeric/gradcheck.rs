//! Finite-difference check of tape gradients against every trainable
//! parameter entry.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Allowed relative error.
    pub tolerance: f64,
    /// Denominator floor: entries whose analytic and numeric gradients are
    /// both below it are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub worst_relative: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

/// Compares analytic gradients of the scalar built by `forward` with central
/// differences. `forward` must be a deterministic function of the store.
pub fn check_gradients(
    store: &ParamStore,
    opts: &GradCheckOptions,
    mut forward: impl FnMut(&ParamStore) -> Result<(Tape, Var)>,
) -> Result<GradCheckReport> {
    let (tape, loss) = forward(store)?;
    let grads = tape.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.accumulate_param_grads(&grads, &mut analytic);

    let mut eval = |s: &ParamStore| -> Result<f64> {
        let (t, v) = forward(s)?;
        let x = t.value(v).item();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Inference("non-finite loss during gradient check".into()))
        }
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let original = store.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = original + opts.step;
            let plus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original - opts.step;
            let minus = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.get(id).grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.worst_relative = report.worst_relative.max(rel);
            if rel <= opts.tolerance {
                report.passed += 1;
            } else {
                report.mismatches.push(GradMismatch {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
