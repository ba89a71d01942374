//! Central finite-difference validation of analytic gradients.
//!
//! The loss closure must be deterministic (dropout disabled); this is not
//! detected, a stochastic loss just yields a meaningless error figure.

use super::graph::{Graph, Var};
use super::tensor::ParamSet;
use crate::error::Result;

/// Relative errors are measured as `|a - n| / max(|a|, |n|, floor)`.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.per_param.iter().find(|p| p.name == name)
    }
}

/// Compares backprop gradients of `loss` against central differences with
/// step `eps` over every coordinate of every parameter. `params` is left
/// untouched.
pub fn finite_difference_check<F>(loss: F, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<Var>,
{
    finite_difference_check_with(loss, params, eps, DEFAULT_REL_FLOOR)
}

pub fn finite_difference_check_with<F>(mut loss: F, params: &ParamSet, eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, &analytic)?;
    g.backward(l, &mut analytic)?;

    let mut eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, p)?;
        Ok(g.scalar(l))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0, per_param: Vec::new() };
    for id in params.ids() {
        let name = params.get(id).name.clone();
        let n = params.get(id).tensor.numel();
        let grads = analytic.get(id).tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let mut check =
            ParamCheck { name: name.clone(), max_rel_error: 0.0, max_abs_analytic: 0.0, max_abs_numeric: 0.0 };
        for i in 0..n {
            let orig = work.get(id).tensor.values()[i];
            work.get_mut(id).tensor.values_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).tensor.values_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).tensor.values_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            check.max_abs_analytic = check.max_abs_analytic.max(a.abs());
            check.max_abs_numeric = check.max_abs_numeric.max(numeric.abs());
            check.max_rel_error = check.max_rel_error.max(rel);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
            report.coordinates += 1;
        }
        report.per_param.push(check);
    }
    Ok(report)
}
