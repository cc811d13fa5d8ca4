//! Central-difference verification of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::Tape;
use super::Var;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(params, &mut tape)?;
    let v = tape.scalar(out)?;
    if !v.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences on
/// every coordinate of every parameter.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(params: &ParamStore, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    Ok(finite_diff_check_subset(params, &ids, eps, f)?.max_rel_error)
}

/// Same as [`finite_diff_check`] restricted to the parameters in `ids`.
pub fn finite_diff_check_subset<F>(
    params: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut tape = Tape::new();
    let out = f(params, &mut tape)?;
    if !tape.scalar(out)?.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let analytic = tape.backward(out, params)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in ids {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).values()[i];
            work.get_mut(id).values_mut()[i] = orig + eps;
            let plus = eval(&work, &f)?;
            work.get_mut(id).values_mut()[i] = orig - eps;
            let minus = eval(&work, &f)?;
            work.get_mut(id).values_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).values()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
