//! Causal multi-head attention kernels with an additive proximity bias.
//!
//! The bias for a (query, key) pair is `psi^T b`, where `psi` is a bitmask over the
//! ordered metapath set and `b` is one learnable row of the bias table. Pairs that
//! are not listed carry no bias.

use super::linalg::{gemm, View, ViewMut};
use super::real::Real;
use super::NnError;

/// Additive mask for keys after the query position.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiasEntry {
    pub query: usize,
    pub key: usize,
    pub bits: u32,
}

/// Sparse list of biased (query, key) pairs with their proximity bitmasks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttentionBias {
    width: usize,
    entries: Vec<BiasEntry>,
}

impl AttentionBias {
    /// `width` is the length of the proximity vectors (M + 1).
    pub fn new(width: usize, entries: Vec<BiasEntry>) -> Self {
        assert!(width <= 32, "proximity vectors are limited to 32 bits");
        AttentionBias { width, entries }
    }

    pub fn empty(width: usize) -> Self {
        AttentionBias::new(width, Vec::new())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn entries(&self) -> &[BiasEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check(&self, seq_len: usize) -> Result<(), NnError> {
        for e in &self.entries {
            if e.query >= seq_len || e.key > e.query {
                return Err(NnError::Shape(format!(
                    "bias pair ({}, {}) invalid for a causal sequence of {seq_len}",
                    e.query, e.key
                )));
            }
            if self.width < 32 && e.bits >> self.width != 0 {
                return Err(NnError::Shape("bias bits exceed vector width".into()));
            }
        }
        Ok(())
    }

    /// `psi^T b` for one bitmask.
    pub fn dot<T: Real>(bits: u32, b: &[T]) -> T {
        let mut s = T::zero();
        let mut m = bits;
        while m != 0 {
            let i = m.trailing_zeros() as usize;
            s += b[i];
            m &= m - 1;
        }
        s
    }
}

/// Pre-softmax scores `[heads, t, t]`: scaled dot products, plus the proximity
/// bias on listed pairs, plus [`MASK_VALUE`] above the diagonal.
pub fn pre_softmax_scores<T: Real>(
    q: &[T],
    k: &[T],
    t: usize,
    d: usize,
    heads: usize,
    bias: Option<(&AttentionBias, &[T])>,
) -> Vec<T> {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mask = T::lit(MASK_VALUE);
    let mut scores = vec![T::zero(); heads * t * t];
    for h in 0..heads {
        let s = &mut scores[h * t * t..(h + 1) * t * t];
        gemm(
            scale,
            View::cols_of(q, t, d, h * dh, dh),
            View::cols_of(k, t, d, h * dh, dh).t(),
            T::zero(),
            ViewMut::new(s, t, t),
        );
        if let Some((pairs, b)) = bias {
            for e in pairs.entries() {
                s[e.query * t + e.key] += AttentionBias::dot(e.bits, b);
            }
        }
        for r in 0..t {
            for c in r + 1..t {
                s[r * t + c] += mask;
            }
        }
    }
    scores
}

/// Returns the `[t, d]` output and the `[heads, t, t]` attention probabilities.
pub(crate) fn forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    t: usize,
    d: usize,
    heads: usize,
    bias: Option<(&AttentionBias, &[T])>,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let mut probs = pre_softmax_scores(q, k, t, d, heads, bias);
    for row in probs.chunks_mut(t) {
        softmax_in_place(row);
    }
    let mut out = vec![T::zero(); t * d];
    for h in 0..heads {
        gemm(
            T::one(),
            View::new(&probs[h * t * t..(h + 1) * t * t], t, t),
            View::cols_of(v, t, d, h * dh, dh),
            T::zero(),
            ViewMut::cols_of(&mut out, t, d, h * dh, dh),
        );
    }
    (out, probs)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub(crate) struct AttentionGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dbias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dout: &[T],
    probs: &[T],
    t: usize,
    d: usize,
    heads: usize,
    bias: Option<&AttentionBias>,
) -> AttentionGrads<T> {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); t * d];
    let mut dk = vec![T::zero(); t * d];
    let mut dv = vec![T::zero(); t * d];
    let mut dbias = bias.map(|b| vec![T::zero(); b.width()]);
    let mut ds = vec![T::zero(); t * t];
    for h in 0..heads {
        let p = &probs[h * t * t..(h + 1) * t * t];
        // dP = dO_h V_h^T
        gemm(
            T::one(),
            View::cols_of(dout, t, d, h * dh, dh),
            View::cols_of(v, t, d, h * dh, dh).t(),
            T::zero(),
            ViewMut::new(&mut ds, t, t),
        );
        gemm(
            T::one(),
            View::new(p, t, t).t(),
            View::cols_of(dout, t, d, h * dh, dh),
            T::one(),
            ViewMut::cols_of(&mut dv, t, d, h * dh, dh),
        );
        for r in 0..t {
            let pr = &p[r * t..(r + 1) * t];
            let dr = &mut ds[r * t..(r + 1) * t];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (x, &pj) in dr.iter_mut().zip(pr) {
                *x = pj * (*x - dot);
            }
        }
        if let (Some(pairs), Some(db)) = (bias, dbias.as_mut()) {
            for e in pairs.entries() {
                let g = ds[e.query * t + e.key];
                let mut m = e.bits;
                while m != 0 {
                    let i = m.trailing_zeros() as usize;
                    db[i] += g;
                    m &= m - 1;
                }
            }
        }
        gemm(
            scale,
            View::new(&ds, t, t),
            View::cols_of(k, t, d, h * dh, dh),
            T::one(),
            ViewMut::cols_of(&mut dq, t, d, h * dh, dh),
        );
        gemm(
            scale,
            View::new(&ds, t, t).t(),
            View::cols_of(q, t, d, h * dh, dh),
            T::one(),
            ViewMut::cols_of(&mut dk, t, d, h * dh, dh),
        );
    }
    AttentionGrads { dq, dk, dv, dbias }
}
