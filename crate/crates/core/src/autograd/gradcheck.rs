//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward passes on constant inputs, so it stays
//! independent of every backward rule it is used to validate.

use super::{DTensor, Graph, Var};
use crate::error::Result;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;
/// Tolerance for ops whose output is linear in the perturbed input.
pub const LINEAR_TOL: f64 = 1e-6;
/// Tolerance for everything else.
pub const NONLINEAR_TOL: f64 = 1e-4;
/// Denominator floor; gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` against central differences for every
/// element of every input. `f` builds a scalar from the given input vars.
pub fn check<F>(inputs: &[DTensor], f: F, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |perturbed: &[DTensor]| -> Result<f64> {
        let mut g = Graph::with_finite_checks(true);
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<DTensor> = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for i in 0..inputs[t].numel() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(grads[i], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}
