//! Temporal audio-visual correlation metric.
//!
//! The relationship between two embeddings `f_i`, `f_j ∈ R^D` is the centered
//! outer product `(f_i − μ_i·1)(f_j − μ_j·1)ᵀ`, a `D×D` matrix whose channels
//! act as samples. Matrices are compared by the cosine of their flattened
//! entries. The triplet loss pulls the audio relationship of an adjacent pair
//! towards the visual relationship of the same pair and pushes it away from a
//! visual relationship whose second frame lies outside a `±τ` window.

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Frobenius norms below this make a cosine degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A differentiable scalar together with the number of degenerate cosines
/// that went into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Term {
    pub value: Var,
    pub degenerate: usize,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `f − mean(f)`, computed relative to `f[0]` so a constant vector centers
/// to exact zeros.
fn center<T: Scalar>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let first = g.index(f, 0)?;
    let shifted = g.sub(f, first)?;
    let m = g.mean(shifted)?;
    Ok(g.sub(shifted, m)?)
}

/// Centered outer product of two `D`-vectors, `D ≥ 2`.
pub fn covariance<T: Scalar>(g: &mut Graph<T>, fi: Var, fj: Var) -> Result<Var> {
    let (si, sj) = (g.shape(fi).to_vec(), g.shape(fj).to_vec());
    if si.len() != 1 || si != sj {
        return Err(shape_err("covariance", &si, &sj).into());
    }
    let d = si[0];
    if d < 2 {
        return Err(invalid("covariance", format!("embedding dimension {d} < 2")));
    }
    let ci = center(g, fi)?;
    let cj = center(g, fj)?;
    let col = g.reshape(ci, &[d, 1])?;
    let row = g.reshape(cj, &[1, d])?;
    Ok(g.matmul(col, row)?)
}

/// Cosine of two equal-shape matrices viewed as flat vectors. Zero (and
/// flagged degenerate) when either norm is below [`DEGENERATE_NORM`].
pub fn flat_cosine<T: Scalar>(g: &mut Graph<T>, c1: Var, c2: Var) -> Result<Term> {
    if g.shape(c1) != g.shape(c2) {
        return Err(shape_err("flat_cosine", g.shape(c1), g.shape(c2)).into());
    }
    let s1 = g.dot(c1, c1)?;
    let s2 = g.dot(c2, c2)?;
    let tiny = T::lit(DEGENERATE_NORM * DEGENERATE_NORM);
    if g.scalar_value(s1) < tiny || g.scalar_value(s2) < tiny {
        return Ok(Term {
            value: g.constant_scalar(T::zero()),
            degenerate: 1,
        });
    }
    let dot = g.dot(c1, c2)?;
    // √(s1·s2) rather than √s1·√s2: correctly rounded sqrt gives √(s²) = s,
    // so cos(c, c) = 1 and cos(c, −c) = −1 exactly.
    let prod = g.mul(s1, s2)?;
    let den = g.sqrt(prod)?;
    let cos = g.div(dot, den)?;
    Ok(Term {
        value: g.clamp(cos, -1.0, 1.0)?,
        degenerate: 0,
    })
}

/// `(1 − cos(c_a, c_v_pos)) + (1 + cos(c_a, c_v_neg))`, in `[0, 4]`.
pub fn tavc_triplet_loss<T: Scalar>(g: &mut Graph<T>, c_a: Var, c_v_pos: Var, c_v_neg: Var) -> Result<Term> {
    let pos = flat_cosine(g, c_a, c_v_pos)?;
    let neg = flat_cosine(g, c_a, c_v_neg)?;
    // (1 − p) + (1 + n) = 2 + (n − p)
    let diff = g.sub(neg.value, pos.value)?;
    Ok(Term {
        value: g.add_scalar(diff, 2.0)?,
        degenerate: pos.degenerate + neg.degenerate,
    })
}

/// Sum of triplet losses over a batch, accumulated in batch order.
pub fn tavc_objective<T: Scalar>(g: &mut Graph<T>, batch: &[(Var, Var, Var)]) -> Result<Term> {
    if batch.is_empty() {
        return Err(invalid("tavc_objective", "empty batch"));
    }
    let mut total: Option<Var> = None;
    let mut degenerate = 0;
    for &(a, p, n) in batch {
        let l = tavc_triplet_loss(g, a, p, n)?;
        degenerate += l.degenerate;
        total = Some(match total {
            None => l.value,
            Some(t) => g.add(t, l.value)?,
        });
    }
    Ok(Term {
        value: total.expect("non-empty"),
        degenerate,
    })
}

/// Mean of `1 − cos(c_a, c_v_gen)` over all pairs, in `[0, 2]`.
pub fn car_loss<T: Scalar>(g: &mut Graph<T>, pairs: &[(Var, Var)]) -> Result<Term> {
    if pairs.is_empty() {
        return Err(invalid("car_loss", "empty pair list"));
    }
    let mut total: Option<Var> = None;
    let mut degenerate = 0;
    for &(a, v) in pairs {
        let c = flat_cosine(g, a, v)?;
        degenerate += c.degenerate;
        total = Some(match total {
            None => c.value,
            Some(t) => g.add(t, c.value)?,
        });
    }
    let mean_cos = g.scale(total.expect("non-empty"), 1.0 / pairs.len() as f64)?;
    let neg = g.neg(mean_cos)?;
    Ok(Term {
        value: g.add_scalar(neg, 1.0)?,
        degenerate,
    })
}

/// Anchor `i` with positive pair `(i−1, i)` and negative pair `(i−1, j)`,
/// `j ∉ [i−τ, i+τ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndex {
    pub anchor: usize,
    pub negative: usize,
    pub tau: usize,
}

impl TripletIndex {
    pub fn positive_pair(&self) -> (usize, usize) {
        (self.anchor - 1, self.anchor)
    }

    pub fn negative_pair(&self) -> (usize, usize) {
        (self.anchor - 1, self.negative)
    }
}

/// Inclusive `[lo, hi]` window around `anchor`, clipped to `[0, len)`.
pub fn exclusion_window(anchor: usize, tau: usize, len: usize) -> (usize, usize) {
    (anchor.saturating_sub(tau), (anchor + tau).min(len - 1))
}

/// Frame indices that are legal negatives for `anchor`, ascending.
pub fn negatives_for(anchor: usize, tau: usize, len: usize) -> impl Iterator<Item = usize> {
    let (lo, hi) = exclusion_window(anchor, tau, len);
    (0..len).filter(move |&j| j < lo || j > hi)
}

/// Minimum sequence length for triplet sampling with window `tau`.
pub fn min_sequence_len(tau: usize) -> usize {
    2 * tau + 3
}

/// One triplet per anchor `i ∈ [1, len−1]`, negatives drawn uniformly from
/// the legal set.
pub fn make_triplet_indices(len: usize, tau: usize, rng: &mut SeededRng) -> Result<Vec<TripletIndex>> {
    if len < min_sequence_len(tau) {
        return Err(invalid(
            "make_triplet_indices",
            format!("sequence length {len} < 2·tau+3 = {}", min_sequence_len(tau)),
        ));
    }
    (1..len)
        .map(|anchor| {
            let (lo, hi) = exclusion_window(anchor, tau, len);
            let count = len - (hi - lo + 1);
            if count == 0 {
                return Err(invalid("make_triplet_indices", format!("no legal negative for anchor {anchor}")));
            }
            let r = rng.below(count);
            let negative = if r < lo { r } else { r + (hi - lo + 1) };
            Ok(TripletIndex { anchor, negative, tau })
        })
        .collect()
}

/// Value-level covariance outside any training graph.
pub fn covariance_of<T: Scalar>(fi: &Tensor<T>, fj: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(fi.clone()), g.constant(fj.clone()));
    let c = covariance(&mut g, a, b)?;
    Ok(g.value(c).clone())
}

/// Value-level cosine; the flag reports degeneracy.
pub fn flat_cosine_of<T: Scalar>(c1: &Tensor<T>, c2: &Tensor<T>) -> Result<(T, bool)> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(c1.clone()), g.constant(c2.clone()));
    let c = flat_cosine(&mut g, a, b)?;
    Ok((g.scalar_value(c.value), c.degenerate > 0))
}
