//! Finite-difference gradient verification harness.
//!
//! A [`Fragment`] is any computation exposing named parameters, a scalar
//! loss, and analytic gradients. [`grad_check`] perturbs every parameter
//! element with central differences and reports the worst relative error.
//! Inputs can participate too: a fragment is free to expose its input tensor
//! under a parameter name, which is how input-gradient paths are verified.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// A differentiable computation under test.
pub trait Fragment {
    /// Stable list of parameter names.
    fn param_names(&self) -> Vec<String>;
    /// Copy of the named parameter.
    fn get_param(&self, name: &str) -> Option<Tensor>;
    /// Replace the named parameter.
    fn set_param(&mut self, name: &str, value: Tensor) -> Result<()>;
    /// Scalar loss at the current parameters. Must leave no gradient or
    /// cache state behind.
    fn loss(&mut self) -> Result<f64>;
    /// Loss and analytic gradients for every parameter in `param_names`.
    fn loss_and_grads(&mut self) -> Result<(f64, BTreeMap<String, Tensor>)>;
}

/// Where and how badly the analytic and numeric gradients disagree most.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compare analytic gradients against central finite differences
/// (`(loss(w+h) − loss(w−h)) / 2h`). The relative error per element is
/// `|a − n| / max(|a|, |n|, 1e-8)`; the report carries the maximum.
pub fn grad_check(fragment: &mut dyn Fragment, h: f64) -> Result<GradCheckReport> {
    let (_, grads) = fragment.loss_and_grads()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for name in fragment.param_names() {
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::Protocol(format!("fragment returned no gradient for {name}")))?
            .clone();
        let original = fragment
            .get_param(&name)
            .ok_or_else(|| Error::Protocol(format!("fragment has no parameter {name}")))?;
        for idx in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[idx] += h;
            fragment.set_param(&name, plus)?;
            let loss_plus = fragment.loss()?;

            let mut minus = original.clone();
            minus.data_mut()[idx] -= h;
            fragment.set_param(&name, minus)?;
            let loss_minus = fragment.loss()?;

            fragment.set_param(&name, original.clone())?;

            let numeric = (loss_plus - loss_minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
