//! Central-difference gradient checking in 64-bit.
//!
//! The numeric side only ever evaluates the forward closure, so it is
//! independent of every backward rule it checks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default perturbation and tolerance.
pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
/// Zero-guard in the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, DENOM_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + floor)
}

/// Compares backward gradients of `f` against central differences for every
/// element of every input (or an evenly strided subset of at most
/// `max_per_input` elements per input).
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, max_per_input: Option<usize>, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    check_floored(inputs, eps, max_per_input, DENOM_FLOOR, f)
}

/// [`check`] with a caller-chosen denominator floor. Deep composites carry
/// central-difference noise far above [`DENOM_FLOOR`] on gradients that are
/// exactly zero in theory, so they compare against a larger floor.
pub fn check_floored<F>(
    inputs: &[Tensor<f64>],
    eps: f64,
    max_per_input: Option<usize>,
    floor: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let graph = Graph::new();
        let vars: Vec<_> = values.iter().map(|t| graph.constant(t.clone())).collect();
        let loss = f(&graph, &vars)?;
        Ok(loss.item())
    };

    let analytic: Vec<Tensor<f64>> = {
        let graph = Graph::new();
        let vars: Vec<_> = inputs.iter().map(|t| graph.variable(t.clone())).collect();
        let loss = f(&graph, &vars)?;
        if loss.shape().iter().product::<usize>() != 1 {
            return Err(Error::Contract("gradient check needs a scalar loss".into()));
        }
        graph.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let step = match max_per_input {
            Some(cap) if cap > 0 && numel > cap => numel.div_ceil(cap),
            _ => 1,
        };
        for ei in (0..numel).step_by(step) {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let err = relative_error_floored(a, numeric, floor);
            report.checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ei, a, numeric));
            }
        }
    }
    Ok(report)
}
