use serde::Serialize;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (numerically) zero are judged by absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat element index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(x + h e_k) - f(x - h e_k)) / 2h` at the listed parameter coordinates.
pub fn grad_check_params<F>(store: &ParamStore, coords: &[(ParamId, usize)], h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let analytic = grads.for_params(&tape, store);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        let y = t.value(v).item();
        if !y.is_finite() {
            return Err(Error::Numeric("non-finite loss during finite differences".into()));
        }
        Ok(y)
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        tol,
        passed: true,
    };
    for &(id, k) in coords {
        let x0 = store.get(id).data()[k];
        probe.get_mut(id).data_mut()[k] = x0 + h;
        let plus = eval(&probe)?;
        probe.get_mut(id).data_mut()[k] = x0 - h;
        let minus = eval(&probe)?;
        probe.get_mut(id).data_mut()[k] = x0;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[id.index()].data()[k];
        let rel = relative_error(a, numeric);
        report.coords_checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((store.name(id).to_string(), k));
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Single-input variant checking every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone());
    let coords: Vec<_> = (0..x.len()).map(|k| (id, k)).collect();
    grad_check_params(&store, &coords, h, tol, |tape, s| {
        let v = tape.param(s, id);
        f(tape, v)
    })
}
