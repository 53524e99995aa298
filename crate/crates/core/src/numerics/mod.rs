//! Dense binary64 numerics shared by every model in the crate.
//!
//! Nothing here knows about LSTMs or rewards; models keep their weights in a
//! [`ParamStore`] so that Adam, gradient clipping, finite differences and
//! checkpointing work on any of them.

mod adam;
mod grad_check;
mod mat;
mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grad_check::{compare_grads, finite_diff_grad, GradMismatch};
pub use mat::{Mat, ParamStore};
pub use rng::{Label, RngStream};

use crate::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    Ok(softmax_unchecked(logits))
}

/// `log softmax(logits)`, computed as `x - logsumexp(x)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let lse = logsumexp(logits);
    Ok(logits.iter().map(|x| x - lse).collect())
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    Ok(())
}

/// `log(sum(exp(x)))` with max subtraction. Entries equal to `-inf` contribute
/// nothing; an all `-inf` input yields `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
