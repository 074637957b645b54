use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;

/// Denominator floor for relative errors: gradients smaller than this are
/// compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the tape gradient of `loss` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every coordinate of every
/// parameter in `params`.
///
/// `loss` builds a scalar on the supplied tape, registering parameters through
/// [`Tape::param_from`]; the numeric side only uses its forward values.
pub fn finite_diff_check<F>(loss: F, params: &ParameterSet, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParameterSet) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference eps must be > 0, got {eps}")));
    }
    let mut tape = Tape::new();
    let root = loss(&mut tape, params)?;
    let grads = tape.backward(root)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let mut t = Tape::new();
        let r = loss(&mut t, p)?;
        Ok(t.scalar(r))
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let analytic = grads.params().get(name).map(|g| g.data().to_vec());
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            probe.get_mut(name).expect("cloned layout").data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name).expect("cloned layout").data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name).expect("cloned layout").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let rel = relative_error(a, numeric);
            let abs = (a - numeric).abs();
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
