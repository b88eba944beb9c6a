//! Finite-difference gradient oracle.

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Initial step of the extrapolation tableau.
pub const DEFAULT_STEP: f64 = 1e-3;

const SHRINK: f64 = 1.4;
const START_SCALES: [f64; 4] = [10.0, 1.0, 0.1, 0.01];
const TABLEAU: usize = 10;

/// Ridders' polynomial extrapolation of central differences: the step
/// shrinks by [`SHRINK`] per row and the estimate with the smallest
/// internal error bound is kept. Returns `(derivative, error bound)`.
pub fn ridders<F>(mut f: F, step: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let shrink2 = SHRINK * SHRINK;
    let mut table = [[0.0f64; TABLEAU]; TABLEAU];
    let mut h = step;
    table[0][0] = (f(h)? - f(-h)?) / (2.0 * h);
    let (mut best, mut err) = (table[0][0], f64::INFINITY);
    for i in 1..TABLEAU {
        h /= SHRINK;
        table[0][i] = (f(h)? - f(-h)?) / (2.0 * h);
        let mut fac = shrink2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= shrink2;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        // higher orders stopped helping: roundoff has taken over
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    Ok((best, err))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against [`ridders`] differences of `f` at every scalar
/// of `params` (starting steps `step·10` down to `step/100`), reporting the worst relative error `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    analytic: &Gradients,
    mut f: F,
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in params.ids() {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).values()[k];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(id).values_mut()[k] = orig + offset;
                let v = f(&work)?;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite evaluation while perturbing {}[{k}]",
                        params.name(id)
                    )));
                }
                Ok(v)
            };
            let mut numeric = 0.0;
            let mut bound = f64::INFINITY;
            // tableaus from several starting steps; the tightest error bound wins
            for scale in START_SCALES {
                let (d, e) = ridders(&mut at, step * scale)?;
                if e < bound {
                    (numeric, bound) = (d, e);
                }
            }
            work.get_mut(id).values_mut()[k] = orig;
            let a = analytic.get(id)[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = params.name(id).to_string();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
