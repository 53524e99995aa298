use super::ParamStore;
use crate::{Error, Result};

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
///
/// `f` must be deterministic: any randomness it uses has to be drawn up front.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamStore, h: f64) -> Result<ParamStore>
where
    F: FnMut(&ParamStore) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::arg("finite difference step must be > 0"));
    }
    let mut grads = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let n = params.expect(name).len();
        for i in 0..n {
            let orig = probe.expect(name).as_slice()[i];
            probe.expect_mut(name).as_mut_slice()[i] = orig + h;
            let plus = f(&probe);
            probe.expect_mut(name).as_mut_slice()[i] = orig - h;
            let minus = f(&probe);
            probe.expect_mut(name).as_mut_slice()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "objective not finite while probing {name}[{i}]"
                )));
            }
            grads.expect_mut(name).as_mut_slice()[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// The worst coordinate found by [`compare_grads`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

/// Compares two gradients coordinate by coordinate.
///
/// The error is `|a - n| / max(|a|, |n|)`; coordinates whose analytic value is
/// below `abs_floor` in magnitude are compared absolutely instead. Returns the
/// worst coordinate as `Err` on failure, or `Ok(worst)` when every error is
/// within tolerance.
pub fn compare_grads(
    analytic: &ParamStore,
    numeric: &ParamStore,
    rel_tol: f64,
    abs_floor: f64,
) -> std::result::Result<Option<GradMismatch>, GradMismatch> {
    // Worst coordinate measured as error / tolerance.
    let mut worst: Option<(f64, GradMismatch)> = None;
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (index, (&av, &nv)) in a.as_slice().iter().zip(n.as_slice()).enumerate() {
            let (error, tol) = if av.abs() < abs_floor {
                ((av - nv).abs(), abs_floor)
            } else {
                ((av - nv).abs() / av.abs().max(nv.abs()), rel_tol)
            };
            let ratio = error / tol;
            if worst.as_ref().is_none_or(|(r, _)| ratio > *r) {
                let m = GradMismatch {
                    name: name.to_owned(),
                    index,
                    analytic: av,
                    numeric: nv,
                    error,
                };
                worst = Some((ratio, m));
            }
        }
    }
    match worst {
        Some((ratio, m)) if ratio > 1.0 => Err(m),
        other => Ok(other.map(|(_, m)| m)),
    }
}
