//! Softmax restricted to a contiguous token range.

use std::ops::Range;

use super::real::Real;
use super::NnError;

/// Log-probabilities of the tokens in `allowed`, normalized over that range only.
pub fn restricted_log_softmax<T: Real>(logits: &[T], allowed: Range<usize>) -> Result<Vec<T>, NnError> {
    if allowed.is_empty() {
        return Err(NnError::EmptyAllowed);
    }
    if allowed.end > logits.len() {
        return Err(NnError::Shape(format!(
            "allowed range {allowed:?} exceeds {} logits",
            logits.len()
        )));
    }
    let row = &logits[allowed];
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
    Ok(row.iter().map(|&x| x - lse).collect())
}

/// Full-length probability vector: zero outside `allowed`, summing to one inside.
pub fn restricted_softmax<T: Real>(logits: &[T], allowed: Range<usize>) -> Result<Vec<T>, NnError> {
    let logp = restricted_log_softmax(logits, allowed.clone())?;
    let mut out = vec![T::zero(); logits.len()];
    for (o, lp) in out[allowed].iter_mut().zip(logp) {
        *o = lp.exp();
    }
    Ok(out)
}
