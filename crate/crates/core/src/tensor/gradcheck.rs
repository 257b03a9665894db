//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Magnitude below which gradients are compared absolutely rather than
/// relatively; central differences cannot resolve smaller values.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Rounding error of one function value, in units of `EPSILON * |f|`.
/// The central difference cannot resolve gradients whose error is below
/// this noise divided by the step, so such entries are compared absolutely.
pub const ROUNDOFF_ULPS: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Flat indices that were checked.
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, MAGNITUDE_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for a central difference of values near `f` taken
/// with `step`: the magnitude at which roundoff alone reaches `tol`.
pub fn resolution_floor(f: f64, step: f64, tol: f64) -> f64 {
    (ROUNDOFF_ULPS * f64::EPSILON * f.abs() / (step * tol)).max(MAGNITUDE_FLOOR)
}

/// Checks the graph-computed gradient of the scalar function `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true)?;
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape()))
        .into_data();
    let value = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false)?;
        let y = f(&mut g, v)?;
        Ok(g.value(y).item())
    };
    check_gradient(value, &analytic, x, step, tol, None)
}

/// Compares a supplied analytic gradient against central differences of
/// `value`. `subset` limits the check to the listed flat indices.
pub fn check_gradient<F>(
    value: F,
    analytic: &[f64],
    x: &Tensor,
    step: f64,
    tol: f64,
    subset: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if analytic.len() != x.numel() {
        return Err(Error::shape(
            "grad_check",
            format!("{} analytic values for {:?}", analytic.len(), x.shape()),
        ));
    }
    let base = value(x)?;
    let again = value(x)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Nondeterministic(format!(
            "repeated evaluation gave {base:e} then {again:e}"
        )));
    }
    let indices: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..x.numel()).collect(),
    };
    let mut numeric = Vec::with_capacity(indices.len());
    let mut picked = Vec::with_capacity(indices.len());
    let mut floors = Vec::with_capacity(indices.len());
    let mut probe = x.clone();
    for &i in &indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
        picked.push(analytic[i]);
        floors.push(resolution_floor(up.abs().max(down.abs()), step, tol));
    }
    let rel_errors: Vec<f64> = picked
        .iter()
        .zip(&numeric)
        .zip(&floors)
        .map(|((&a, &n), &f)| relative_error_floored(a, n, f))
        .collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        indices,
        analytic: picked,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}
