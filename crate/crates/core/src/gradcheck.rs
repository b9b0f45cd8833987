//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Compares backpropagated gradients of `f` against central differences for
/// every entry of every parameter.
///
/// `f` must build a scalar loss deterministically from the parameter values.
/// On return `params` holds its original values and the analytic gradients.
pub fn finite_diff_check<F>(params: &mut ParamSet, f: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<Var>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    finite_diff_check_subset(params, &ids, f, h)
}

/// Like [`finite_diff_check`], restricted to the listed parameters.
pub fn finite_diff_check_subset<F>(
    params: &mut ParamSet,
    ids: &[ParamId],
    mut f: F,
    h: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-4]")));
    }
    params.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    check_finite(g.value(loss).item())?;
    g.backward(loss)?;
    g.accumulate_param_grads(params);

    let mut eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::inference();
        let loss = f(&mut g, params)?;
        let v = g.value(loss).item();
        check_finite(v)?;
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for &id in ids {
        for j in 0..params.get(id).value.len() {
            let orig = params.get(id).value.data()[j];
            params.get_mut(id).value.data_mut()[j] = orig + h;
            let plus = eval(params);
            params.get_mut(id).value.data_mut()[j] = orig - h;
            let minus = eval(params);
            params.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = params.get(id).grad[j];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), j));
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}
