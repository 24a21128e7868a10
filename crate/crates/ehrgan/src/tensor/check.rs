//! Gradient checking against central finite differences.
//!
//! The backward pass of every op is hand-derived, so the crate ships the
//! checker that keeps it honest: perturb each parameter scalar by ±h, rerun
//! the loss, and compare the slope with the tape's gradient.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::optim::ParamSet;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for analytic-vs-numeric agreement.
pub const FD_REL_TOL: f64 = 1e-4;
/// Absolute floor: disagreements below this pass regardless of magnitude.
pub const FD_ABS_FLOOR: f64 = 1e-6;

/// Numeric gradient of `f` w.r.t. every scalar in `params`, by central
/// differences with step `h`. `params` is restored exactly on return.
pub fn central_diff_params(
    params: &mut ParamSet,
    h: f64,
    mut f: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for entry in params.entry_names() {
        let n = params.value(&entry)?.len();
        let shape = params.value(&entry)?.shape().to_vec();
        let mut grad = vec![0.0; n];
        for (i, slot) in grad.iter_mut().enumerate() {
            let old = params.value(&entry)?.data()[i];
            params.value_mut(&entry)?.data_mut()[i] = old + h;
            let up = f(params)?;
            params.value_mut(&entry)?.data_mut()[i] = old - h;
            let down = f(params)?;
            params.value_mut(&entry)?.data_mut()[i] = old;
            *slot = (up - down) / (2.0 * h);
        }
        out.insert(entry, Tensor::from_vec(&shape, grad)?);
    }
    Ok(out)
}

/// Worst disagreement between an analytic gradient map (keyed `<set>/<entry>`
/// as produced by `Graph::param_grads`) and a numeric one (keyed by entry).
#[derive(Debug, Clone)]
pub struct GradReport {
    /// max over scalars of |a-n| / max(|a|, |n|, FD_ABS_FLOOR / FD_REL_TOL);
    /// `max_rel <= FD_REL_TOL` iff every scalar satisfies
    /// |a-n| <= max(FD_REL_TOL * max(|a|,|n|), FD_ABS_FLOOR).
    pub max_rel: f64,
    pub worst_entry: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare_grads(
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
    set_name: &str,
) -> GradReport {
    let floor_denom = FD_ABS_FLOOR / FD_REL_TOL;
    let mut report = GradReport {
        max_rel: 0.0,
        worst_entry: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (entry, num) in numeric {
        let key = format!("{set_name}/{entry}");
        let zero = Tensor::zeros(num.shape());
        // a parameter the loss never touches has no analytic gradient: zero.
        let ana = analytic.get(&key).unwrap_or(&zero);
        for (i, (&a, &n)) in ana.data().iter().zip(num.data()).enumerate() {
            let denom = a.abs().max(n.abs()).max(floor_denom);
            let rel = (a - n).abs() / denom;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst_entry = entry.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report
}
