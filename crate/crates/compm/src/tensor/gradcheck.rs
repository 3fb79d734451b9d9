//! Finite-difference gradient checking.
//!
//! The checker evaluates a user-supplied scalar loss twice per parameter
//! element (central differences) and compares against the gradients the tape
//! produces. The loss closure must be deterministic: build it from eval-mode
//! forwards only.

use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Settings for a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tolerance: f64,
    /// Absolute differences below this floor pass regardless of scale.
    pub absolute_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, tolerance: 1e-4, absolute_floor: 1e-8 }
    }
}

/// Outcome of a sweep: the worst element over all checked parameters.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub elements_checked: usize,
}

impl GradReport {
    pub fn passes(&self, settings: &GradCheck) -> bool {
        self.max_rel_error < settings.tolerance
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compare analytic gradients of `loss_fn` against central finite differences
/// for every element of every listed parameter.
///
/// `loss_fn` receives a fresh tape and must return a scalar loss built from
/// the same parameter tensors each call.
pub fn check_gradients<F>(
    params: &[(String, Tensor)],
    settings: &GradCheck,
    loss_fn: F,
) -> Result<GradReport>
where
    F: Fn(&Tape) -> Result<Tensor>,
{
    // Analytic pass.
    for (_, p) in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = loss_fn(&tape)?;
    if !loss.is_scalar() {
        return Err(Error::contract("gradient check loss must be scalar".to_string()));
    }
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_or_zeros()).collect();
    drop(tape);

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        elements_checked: 0,
    };

    for ((name, p), grads) in params.iter().zip(&analytic) {
        for idx in 0..p.numel() {
            let original = p.value_at(idx);

            p.with_data_mut(|d| d[idx] = original + settings.step);
            let plus = loss_fn(&Tape::new())?.item();
            p.with_data_mut(|d| d[idx] = original - settings.step);
            let minus = loss_fn(&Tape::new())?.item();
            p.with_data_mut(|d| d[idx] = original);

            let numeric = (plus - minus) / (2.0 * settings.step);
            let rel = relative_error(grads[idx], numeric, settings.absolute_floor);
            report.elements_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}
