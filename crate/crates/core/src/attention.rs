//! Partial attention over one KV chunk and the log-sum-exp merge of partials.
//!
//! A [`PartialResult`] keeps, for every (query, head), the softmax-weighted
//! value average over the tokens it has seen (`out`), the largest scaled score
//! (`max_score`) and the sum of `exp(score - max_score)` (`exp_sum`). `out` is
//! always normalized, so after the last merge it is the attention output.
//! The empty partial (`max_score = -inf`, `exp_sum = 0`) is the identity of
//! [`por`].

use thiserror::Error;

use crate::element::Element;
use crate::forest::{Forest, ForestError, QueryBatch, RequestId};
use crate::tensor::{Tensor3, View3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("query {query} sees no tokens")]
    EmptyVisibleSet { query: usize },
    #[error("partial results have different shapes")]
    ShapeMismatch,
    #[error("(query {query}, head {head}) has no visible tokens")]
    NoVisibleTokens { query: usize, head: usize },
    #[error(transparent)]
    Forest(#[from] ForestError),
}

/// Streaming softmax state for `n_q` queries × `h_q` heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialResult<T> {
    n_q: usize,
    h_q: usize,
    d: usize,
    out: Vec<T>,
    max_score: Vec<T>,
    exp_sum: Vec<T>,
}

impl<T: Element> PartialResult<T> {
    /// Assembles a partial from raw parts; `out` is `[n_q × h_q × d]`, the
    /// other two `[n_q × h_q]`.
    pub fn from_parts(
        n_q: usize,
        h_q: usize,
        d: usize,
        out: Vec<T>,
        max_score: Vec<T>,
        exp_sum: Vec<T>,
    ) -> Result<Self, AttentionError> {
        if out.len() != n_q * h_q * d || max_score.len() != n_q * h_q || exp_sum.len() != n_q * h_q {
            return Err(AttentionError::DimensionMismatch("partial result buffers".into()));
        }
        Ok(Self {
            n_q,
            h_q,
            d,
            out,
            max_score,
            exp_sum,
        })
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn h_q(&self) -> usize {
        self.h_q
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn out(&self, query: usize, head: usize) -> &[T] {
        let start = (query * self.h_q + head) * self.d;
        &self.out[start..start + self.d]
    }

    pub fn max_score(&self, query: usize, head: usize) -> T {
        self.max_score[query * self.h_q + head]
    }

    pub fn exp_sum(&self, query: usize, head: usize) -> T {
        self.exp_sum[query * self.h_q + head]
    }

    pub fn out_slice(&self) -> &[T] {
        &self.out
    }

    pub fn max_slice(&self) -> &[T] {
        &self.max_score
    }

    pub fn sum_slice(&self) -> &[T] {
        &self.exp_sum
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.n_q == other.n_q && self.h_q == other.h_q && self.d == other.d
    }

    /// The state of a single query row as a one-query partial.
    pub fn select_query(&self, query: usize) -> Self {
        let (w, hd) = (self.h_q, self.h_q * self.d);
        Self {
            n_q: 1,
            h_q: self.h_q,
            d: self.d,
            out: self.out[query * hd..(query + 1) * hd].to_vec(),
            max_score: self.max_score[query * w..(query + 1) * w].to_vec(),
            exp_sum: self.exp_sum[query * w..(query + 1) * w].to_vec(),
        }
    }

    /// Merges `other` into `self`, the in-place form of [`por`].
    pub fn merge_from(&mut self, other: &Self) -> Result<(), AttentionError> {
        if !self.same_shape(other) {
            return Err(AttentionError::ShapeMismatch);
        }
        let d = self.d;
        for k in 0..self.max_score.len() {
            merge_state(
                &mut self.max_score[k],
                &mut self.exp_sum[k],
                &mut self.out[k * d..(k + 1) * d],
                other.max_score[k],
                other.exp_sum[k],
                &other.out[k * d..(k + 1) * d],
            );
        }
        Ok(())
    }
}

/// Merges state `b` into state `a` for one (query, head).
#[inline]
fn merge_state<T: Element>(ma: &mut T, sa: &mut T, oa: &mut [T], mb: T, sb: T, ob: &[T]) {
    if sb == T::zero() {
        return;
    }
    if *sa == T::zero() {
        *ma = mb;
        *sa = sb;
        oa.copy_from_slice(ob);
        return;
    }
    let m = if *ma >= mb { *ma } else { mb };
    let wa = *sa * (*ma - m).exp();
    let wb = sb * (mb - m).exp();
    let s = wa + wb;
    for (x, &y) in oa.iter_mut().zip(ob) {
        *x = (*x * wa + y * wb) / s;
    }
    *ma = m;
    *sa = s;
}

/// The identity partial: zero output, `-inf` max, zero exp-sum.
pub fn empty_partial<T: Element>(n_q: usize, h_q: usize, d: usize) -> PartialResult<T> {
    PartialResult {
        n_q,
        h_q,
        d,
        out: vec![T::zero(); n_q * h_q * d],
        max_score: vec![T::neg_infinity(); n_q * h_q],
        exp_sum: vec![T::zero(); n_q * h_q],
    }
}

/// Partial attention of `queries` (`[n_q × h_q × d]`) against one KV chunk
/// (`[n × h_kv × d]`). Query `i` attends to the first `visible[i]` tokens.
/// Query head `h` reads KV head `h / (h_q / h_kv)`.
pub fn pac<T: Element>(
    queries: View3<'_, T>,
    keys: View3<'_, T>,
    values: View3<'_, T>,
    visible: &[usize],
) -> Result<PartialResult<T>, AttentionError> {
    if let Some(query) = visible.iter().position(|&v| v == 0) {
        return Err(AttentionError::EmptyVisibleSet { query });
    }
    pac_masked(queries, keys, values, visible)
}

/// Like [`pac`], but a query with `visible[i] == 0` yields the identity state.
pub(crate) fn pac_masked<T: Element>(
    queries: View3<'_, T>,
    keys: View3<'_, T>,
    values: View3<'_, T>,
    visible: &[usize],
) -> Result<PartialResult<T>, AttentionError> {
    let (n_q, h_q, d) = (queries.rows(), queries.heads(), queries.dim());
    let (n, h_kv) = (keys.rows(), keys.heads());
    if n == 0 || n_q == 0 {
        return Err(AttentionError::DimensionMismatch("empty query or key set".into()));
    }
    if keys.dim() != d || values.dim() != d || values.heads() != h_kv || values.rows() != n {
        return Err(AttentionError::DimensionMismatch(format!(
            "keys [{n}×{h_kv}×{}] / values [{}×{}×{}] against queries of dim {d}",
            keys.dim(),
            values.rows(),
            values.heads(),
            values.dim()
        )));
    }
    if h_kv == 0 || h_q % h_kv != 0 {
        return Err(AttentionError::DimensionMismatch(format!(
            "h_q = {h_q} is not a multiple of h_kv = {h_kv}"
        )));
    }
    if visible.len() != n_q {
        return Err(AttentionError::DimensionMismatch(format!(
            "{} visibility counts for {n_q} queries",
            visible.len()
        )));
    }
    if let Some(&v) = visible.iter().find(|&&v| v > n) {
        return Err(AttentionError::DimensionMismatch(format!(
            "visible {v} exceeds chunk length {n}"
        )));
    }

    let group = h_q / h_kv;
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut result = empty_partial(n_q, h_q, d);
    let mut scores = vec![T::zero(); n];
    for (i, &vis) in visible.iter().enumerate() {
        if vis == 0 {
            continue;
        }
        for h in 0..h_q {
            let kvh = h / group;
            let q = queries.vector(i, h);
            let mut m = T::neg_infinity();
            for (j, s) in scores[..vis].iter_mut().enumerate() {
                *s = dot(q, keys.vector(j, kvh)) * scale;
                if *s > m {
                    m = *s;
                }
            }
            let k = i * h_q + h;
            let acc = &mut result.out[k * d..(k + 1) * d];
            let mut sum = T::zero();
            for (j, &s) in scores[..vis].iter().enumerate() {
                let w = (s - m).exp();
                sum = sum + w;
                for (a, &v) in acc.iter_mut().zip(values.vector(j, kvh)) {
                    *a = *a + w * v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a / sum;
            }
            result.max_score[k] = m;
            result.exp_sum[k] = sum;
        }
    }
    Ok(result)
}

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Merges two partials computed over disjoint token sets of the same queries.
pub fn por<T: Element>(a: &PartialResult<T>, b: &PartialResult<T>) -> Result<PartialResult<T>, AttentionError> {
    let mut merged = a.clone();
    merged.merge_from(b)?;
    Ok(merged)
}

/// Final attention output `[bs × h_q × d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Output<T> {
    pub out: Tensor3<T>,
}

impl<T: Element> Output<T> {
    /// Largest normwise relative error over all (query, head) vectors:
    /// `max |self - reference|_inf / |reference|_inf`.
    pub fn max_rel_err(&self, reference: &Output<T>) -> f64 {
        max_rel_err(self.out.as_slice(), reference.out.as_slice(), self.out.dim())
    }

    pub fn is_finite(&self) -> bool {
        self.out.as_slice().iter().all(|x| x.is_finite())
    }
}

/// Normwise relative error per `dim`-sized chunk, maximized over chunks.
/// Any non-finite value yields `f64::INFINITY`.
pub fn max_rel_err<T: Element, U: Element>(actual: &[T], reference: &[U], dim: usize) -> f64 {
    assert_eq!(actual.len(), reference.len(), "compared buffers differ in length");
    let mut worst: f64 = 0.0;
    for (a, r) in actual.chunks(dim.max(1)).zip(reference.chunks(dim.max(1))) {
        let mut diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (&x, &y) in a.iter().zip(r) {
            let (x, y) = (Element::to_f64(x), Element::to_f64(y));
            if !x.is_finite() || !y.is_finite() {
                return f64::INFINITY;
            }
            diff = diff.max((x - y).abs());
            scale = scale.max(y.abs());
        }
        let err = if diff == 0.0 {
            0.0
        } else {
            diff / scale.max(f64::MIN_POSITIVE)
        };
        worst = worst.max(err);
    }
    worst
}

/// Extracts the output once every (query, head) has seen at least one token.
pub fn finalize<T: Element>(p: &PartialResult<T>) -> Result<Output<T>, AttentionError> {
    if let Some(k) = p.exp_sum.iter().position(|&s| s <= T::zero()) {
        return Err(AttentionError::NoVisibleTokens {
            query: k / p.h_q,
            head: k % p.h_q,
        });
    }
    let out = Tensor3::from_vec(p.n_q, p.h_q, p.d, p.out.clone()).expect("partial buffers are consistent");
    Ok(Output { out })
}

/// Reference attention: one global softmax per (request, head) over the
/// request's materialized context.
pub fn naive_attention<T: Element>(queries: &QueryBatch<T>, forest: &Forest<T>) -> Result<Output<T>, AttentionError> {
    if queries.bs() != forest.num_requests() || queries.h_kv() != forest.h_kv() || queries.d() != forest.d() {
        return Err(AttentionError::DimensionMismatch("queries do not match forest".into()));
    }
    let (h_q, d, group) = (queries.h_q(), queries.d(), queries.group_size());
    let scale = T::one() / T::from_f64(d as f64).sqrt();
    let mut out = Tensor3::zeros(queries.bs(), h_q, d);
    for r in 0..queries.bs() {
        let (keys, values) = forest.materialize_context(RequestId(r))?;
        if keys.rows() == 0 {
            return Err(AttentionError::EmptyVisibleSet { query: r });
        }
        for h in 0..h_q {
            let kvh = h / group;
            let q = queries.tensor().vector(r, h);
            let scores: Vec<T> = (0..keys.rows()).map(|j| dot(q, keys.vector(j, kvh)) * scale).collect();
            let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
            let weights: Vec<T> = scores.iter().map(|&s| (s - m).exp()).collect();
            let total = weights.iter().copied().fold(T::zero(), |a, b| a + b);
            let dst = out.vector_mut(r, h);
            for (j, &w) in weights.iter().enumerate() {
                for (o, &v) in dst.iter_mut().zip(values.vector(j, kvh)) {
                    *o = *o + w * v;
                }
            }
            for o in dst.iter_mut() {
                *o = *o / total;
            }
        }
    }
    Ok(Output { out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, heads: usize, dim: usize, xs: &[f64]) -> Tensor3<f64> {
        Tensor3::from_vec(rows, heads, dim, xs.to_vec()).unwrap()
    }

    fn single(q: f64, k: &[f64], v: &[f64]) -> PartialResult<f64> {
        let qt = t(1, 1, 1, &[q]);
        let kt = t(k.len(), 1, 1, k);
        let vt = t(v.len(), 1, 1, v);
        pac(qt.view(), kt.view(), vt.view(), &[k.len()]).unwrap()
    }

    #[test]
    fn pac_single_token() {
        let p = single(2.0, &[3.0], &[7.0]);
        assert_eq!(p.out(0, 0), &[7.0]);
        assert_eq!(p.max_score(0, 0), 6.0);
        assert_eq!(p.exp_sum(0, 0), 1.0);
        assert_eq!(finalize(&p).unwrap().out.as_slice(), &[7.0]);
    }

    #[test]
    fn pac_uniform_scores() {
        let p = single(1.0, &[0.0, 0.0], &[2.0, 4.0]);
        assert_eq!(p.out(0, 0), &[3.0]);
        assert_eq!(p.max_score(0, 0), 0.0);
        assert_eq!(p.exp_sum(0, 0), 2.0);
    }

    #[test]
    fn pac_two_tokens_matches_softmax_oracle() {
        // Oracle: weights e^6, e^10 normalized.
        let (w1, w2) = (6f64.exp(), 10f64.exp());
        let expected = (7.0 * w1 + 11.0 * w2) / (w1 + w2);
        let p = single(2.0, &[3.0, 5.0], &[7.0, 11.0]);
        assert!((p.out(0, 0)[0] - expected).abs() < 1e-12);
        assert!((expected - 10.92806).abs() < 1e-5);
        assert_eq!(p.max_score(0, 0), 10.0);
        assert!((p.exp_sum(0, 0) - 1.0183156388887342).abs() < 1e-15);
    }

    #[test]
    fn por_of_single_tokens_equals_joint_pac() {
        let a = single(2.0, &[3.0], &[7.0]);
        let b = single(2.0, &[5.0], &[11.0]);
        let joint = single(2.0, &[3.0, 5.0], &[7.0, 11.0]);
        let m = por(&a, &b).unwrap();
        assert_eq!(m.max_score(0, 0), 10.0);
        assert!((m.exp_sum(0, 0) - joint.exp_sum(0, 0)).abs() < 1e-15);
        assert!((m.out(0, 0)[0] - joint.out(0, 0)[0]).abs() < 1e-12);
    }

    #[test]
    fn identity_laws() {
        let x = single(2.0, &[3.0, 5.0], &[7.0, 11.0]);
        let e = empty_partial::<f64>(1, 1, 1);
        assert_eq!(por(&x, &e).unwrap(), x);
        assert_eq!(por(&e, &x).unwrap(), x);
        assert_eq!(por(&e, &e).unwrap(), e);
        assert!(matches!(
            finalize(&e),
            Err(AttentionError::NoVisibleTokens { query: 0, head: 0 })
        ));
    }

    #[test]
    fn por_shape_mismatch() {
        let a = empty_partial::<f64>(1, 1, 2);
        let b = empty_partial::<f64>(2, 1, 2);
        assert_eq!(por(&a, &b), Err(AttentionError::ShapeMismatch));
    }

    #[test]
    fn pac_errors() {
        let q = t(1, 1, 1, &[1.0]);
        let k = t(2, 1, 1, &[0.0, 1.0]);
        assert!(matches!(
            pac(q.view(), k.view(), k.view(), &[0]),
            Err(AttentionError::EmptyVisibleSet { query: 0 })
        ));
        let k2 = t(1, 1, 2, &[0.0, 1.0]);
        assert!(matches!(
            pac(q.view(), k2.view(), k2.view(), &[1]),
            Err(AttentionError::DimensionMismatch(_))
        ));
        let q3 = t(1, 3, 1, &[1.0, 2.0, 3.0]);
        let k3 = t(1, 2, 1, &[1.0, 2.0]);
        assert!(matches!(
            pac(q3.view(), k3.view(), k3.view(), &[1]),
            Err(AttentionError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn visibility_masks_trailing_tokens() {
        let p = single(2.0, &[3.0, 5.0], &[7.0, 11.0]);
        let q = t(1, 1, 1, &[2.0]);
        let k = t(2, 1, 1, &[3.0, 5.0]);
        let v = t(2, 1, 1, &[7.0, 11.0]);
        let masked = pac(q.view(), k.view(), v.view(), &[1]).unwrap();
        assert_eq!(masked.out(0, 0), &[7.0]);
        assert_ne!(masked, p);
    }

    #[test]
    fn grouped_heads_read_their_kv_head() {
        // h_q = 4, h_kv = 2: heads 0,1 -> kv 0; heads 2,3 -> kv 1.
        let q = t(1, 4, 1, &[1.0, 1.0, 1.0, 1.0]);
        let k = t(1, 2, 1, &[0.0, 0.0]);
        let v = t(1, 2, 1, &[5.0, 9.0]);
        let p = pac(q.view(), k.view(), v.view(), &[1]).unwrap();
        let outs: Vec<f64> = (0..4).map(|h| p.out(0, h)[0]).collect();
        assert_eq!(outs, vec![5.0, 5.0, 9.0, 9.0]);
    }

    #[test]
    fn large_scores_stay_finite() {
        let p = single(1.0, &[500.0, -500.0, 499.0], &[1.0, 2.0, 3.0]);
        assert!(p.out(0, 0)[0].is_finite());
        let a = single(1.0, &[500.0], &[1.0]);
        let b = single(1.0, &[-500.0], &[2.0]);
        let m = por(&a, &b).unwrap();
        assert!(m.out(0, 0)[0].is_finite());
        assert_eq!(m.out(0, 0)[0], 1.0);
    }

    #[test]
    fn rel_err_is_normwise() {
        assert_eq!(max_rel_err(&[1.0f64, 0.0], &[1.0f64, 0.0], 2), 0.0);
        assert!((max_rel_err(&[1.0f64, 1e-3], &[1.0f64, 0.0], 2) - 1e-3).abs() < 1e-15);
        assert_eq!(max_rel_err(&[f64::NAN], &[1.0f64], 1), f64::INFINITY);
    }
}
