//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::{AutodiffError, ParameterStore, Real, Tape, Var};

/// Smallest denominator used when turning an absolute gradient discrepancy
/// into a relative one, so near-zero gradients are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Per-parameter gradients flattened to `f64`.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Default central-difference step at `f64`.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `|analytic - numeric| / max(|numeric|, REL_ERROR_FLOOR)`, so an analytic
/// gradient that is off by a factor of two scores 1.0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(REL_ERROR_FLOOR)
}

/// Gradients of the loss with respect to every parameter that requires one.
/// Parameters the loss does not reach get zeros.
pub fn analytic_gradient<F, E, L>(store: &ParameterStore<F>, mut loss_fn: L) -> Result<GradMap, E>
where
    F: Real,
    E: From<AutodiffError>,
    L: for<'t> FnMut(&'t Tape<F>, &ParameterStore<F>) -> Result<Var<'t, F>, E>,
{
    let tape = Tape::new();
    let loss = loss_fn(&tape, store)?;
    let grads = tape.backward(loss)?;
    Ok(store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(name, t)| {
            let g = grads
                .param(name)
                .map(|g| g.iter().map(|v| v.to_f64_lossy()).collect())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            (name.to_string(), g)
        })
        .collect())
}

/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every scalar of every parameter
/// that requires a gradient. The store is restored before returning.
pub fn numerical_gradient<F, E, L>(
    store: &mut ParameterStore<F>,
    eps: F,
    mut loss_fn: L,
) -> Result<GradMap, E>
where
    F: Real,
    E: From<AutodiffError>,
    L: for<'t> FnMut(&'t Tape<F>, &ParameterStore<F>) -> Result<Var<'t, F>, E>,
{
    let names: Vec<String> = store
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    let mut eval = |store: &ParameterStore<F>| -> Result<f64, E> {
        let tape = Tape::new();
        let loss = loss_fn(&tape, store)?;
        Ok(loss.item().to_f64_lossy())
    };
    let mut out = GradMap::new();
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.numel());
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.get(&name).unwrap().values()[i];
            store.get_mut(&name).unwrap().values_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(&name).unwrap().values_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(&name).unwrap().values_mut()[i] = orig;
            g.push((plus? - minus?) / (2.0 * eps.to_f64_lossy()));
        }
        out.insert(name, g);
    }
    Ok(out)
}

/// Finds the entry with the largest relative error between two gradient
/// maps over the same parameters.
pub fn compare(analytic: &GradMap, numeric: &GradMap) -> Result<GradCheckReport, AutodiffError> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (name, a) in analytic {
        let n = numeric
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.clone()))?;
        if n.len() != a.len() {
            return Err(AutodiffError::Dimension {
                op: "compare",
                left: vec![a.len()],
                right: vec![n.len()],
            });
        }
        for (i, (av, nv)) in a.iter().zip(n).enumerate() {
            let err = relative_error(*av, *nv);
            report.checked += 1;
            // NaN compares false; treat it as the worst possible error
            if err > report.max_rel_error || err.is_nan() && !report.max_rel_error.is_nan() {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst_param: name.clone(),
                    worst_index: i,
                    analytic: *av,
                    numeric: *nv,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// Compares analytic gradients of `loss_fn` with central finite
/// differences over every scalar parameter and reports the worst entry.
pub fn finite_difference_check<F, E, L>(
    store: &mut ParameterStore<F>,
    eps: F,
    mut loss_fn: L,
) -> Result<GradCheckReport, E>
where
    F: Real,
    E: From<AutodiffError>,
    L: for<'t> FnMut(&'t Tape<F>, &ParameterStore<F>) -> Result<Var<'t, F>, E>,
{
    let analytic = analytic_gradient(store, &mut loss_fn)?;
    let numeric = numerical_gradient(store, eps, &mut loss_fn)?;
    Ok(compare(&analytic, &numeric)?)
}
