//! Central finite-difference verification of tape gradients.

use ndarray::{ArrayD, Dimension};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::ParamStore;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so coordinates whose true
/// derivative is zero are measured on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter and coordinate of the worst relative error.
    pub worst_param: String,
    pub worst_index: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

fn scalar_output(g: &Graph<f64>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar output, got {:?}",
            v.shape()
        )));
    }
    Ok(v.iter().next().copied().unwrap())
}

/// Compare tape gradients of the scalar `op` with central differences over
/// every coordinate of every parameter in `params`. The op reads its
/// parameters with [`Graph::param_from`].
pub fn grad_check_params<F>(op: F, params: &ParamStore<f64>, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = op(&mut g, params)?;
    scalar_output(&g, out)?;
    let grads = g.param_grads(&g.backward(out));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: String::new(),
        worst_index: Vec::new(),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        tolerance,
        passed: true,
    };
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = op(&mut g, store)?;
        scalar_output(&g, out)
    };
    let mut work = params.clone();
    for (name, value) in params.iter() {
        let zero = ArrayD::zeros(value.raw_dim());
        let analytic = grads.get(name).unwrap_or(&zero);
        for (idx, &a) in analytic.indexed_iter() {
            let coord = idx.slice().to_vec();
            if !a.is_finite() {
                return Err(Error::NonFinite(format!(
                    "analytic gradient of {name} at {coord:?} is {a}"
                )));
            }
            let x0 = value[&idx];
            work.get_mut(name)?[&idx] = x0 + FD_STEP;
            let fp = eval(&work)?;
            work.get_mut(name)?[&idx] = x0 - FD_STEP;
            let fm = eval(&work)?;
            work.get_mut(name)?[&idx] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "output is non-finite when perturbing {name} at {coord:?}"
                )));
            }
            let n = (fp - fm) / (2.0 * FD_STEP);
            let rel = relative_error(a, n);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = coord;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}

/// [`grad_check_params`] over a list of inputs, named `input0`, `input1`, ...
pub fn grad_check<F>(op: F, inputs: &[ArrayD<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    let store: ParamStore<f64> = names.iter().cloned().zip(inputs.iter().cloned()).collect();
    grad_check_params(
        |g, s| {
            let vars = names.iter().map(|n| g.param_from(s, n)).collect::<Result<Vec<_>>>()?;
            op(g, &vars)
        },
        &store,
        tolerance,
    )
}
