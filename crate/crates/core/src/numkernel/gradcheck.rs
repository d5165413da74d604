use serde::Serialize;

use super::layers::ParamSet;
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences over every
/// coordinate of every parameter of `model`.
///
/// `objective(model, with_grad)` must return the scalar loss and, when
/// `with_grad` is set, accumulate its gradient into the parameters (which are
/// zeroed beforehand). It must be deterministic in the parameter values.
pub fn finite_diff_check<M, F>(model: &mut M, h: f64, mut objective: F) -> Result<GradCheckReport>
where
    M: ParamSet + ?Sized,
    F: FnMut(&mut M, bool) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("step h = {h:e} outside [1e-7, 1e-3]")));
    }
    model.zero_grad();
    let base = objective(model, true)?;
    if !base.is_finite() {
        return Err(Error::Evaluation(format!("objective is {base}")));
    }
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.grad.data().to_vec())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = model.params_mut()[pi].value.data()[k];
            model.params_mut()[pi].value.data_mut()[k] = orig + h;
            let fp = objective(model, false)?;
            model.params_mut()[pi].value.data_mut()[k] = orig - h;
            let fm = objective(model, false)?;
            model.params_mut()[pi].value.data_mut()[k] = orig;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::Evaluation(format!(
                    "objective non-finite while perturbing {}[{k}]",
                    model.params()[pi].name
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((model.params()[pi].name.clone(), k));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
