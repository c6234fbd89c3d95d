//! Scaled dot-product attention with log-sum-exp statistics, and the exact
//! fusion of two partial attention results computed over disjoint key sets.
//!
//! Tensors are flat row-major slices. Values are stored in the element type
//! `T` (`f32` is the engine's working precision, `f64` the oracle's); every
//! reduction (dot products, softmax sums, weighted value sums) accumulates in
//! `f64`, mirroring the low-precision-storage / wide-accumulator split of GPU
//! attention kernels.

use std::fmt::Debug;

use crate::error::{check_len, contract, Result};

/// Storage element of attention tensors.
pub trait Element: Copy + Default + Debug + PartialOrd + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
}

/// Head count, per-head dimension and the factor applied to raw `q·k` scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadShape {
    pub num_heads: usize,
    pub head_dim: usize,
    pub scale: f64,
}

impl HeadShape {
    /// Shape with the conventional `1/sqrt(head_dim)` score scale.
    pub fn new(num_heads: usize, head_dim: usize) -> Result<Self> {
        Self::with_scale(num_heads, head_dim, 1.0 / (head_dim.max(1) as f64).sqrt())
    }

    pub fn with_scale(num_heads: usize, head_dim: usize, scale: f64) -> Result<Self> {
        if num_heads == 0 || head_dim == 0 {
            return Err(contract(format!(
                "head shape needs num_heads >= 1 and head_dim >= 1, got {num_heads}x{head_dim}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(contract(format!("score scale must be positive, got {scale}")));
        }
        Ok(Self {
            num_heads,
            head_dim,
            scale,
        })
    }
}

/// Partial attention output of one head over some key set.
///
/// `output` is `[n_queries × head_dim]`, `lse` holds one log-partition value
/// per query row and `weights`, when retained, is `[n_queries × n_keys]`.
/// An empty key set is represented by `lse = -inf` and an all-zero output,
/// which is the identity element of [`merge_states`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult<T> {
    pub n_queries: usize,
    pub head_dim: usize,
    pub n_keys: usize,
    pub output: Vec<T>,
    pub lse: Vec<T>,
    pub weights: Option<Vec<T>>,
}

impl<T: Element> AttentionResult<T> {
    /// Result of attending to no keys at all.
    pub fn empty(n_queries: usize, head_dim: usize, keep_weights: bool) -> Self {
        Self {
            n_queries,
            head_dim,
            n_keys: 0,
            output: vec![T::default(); n_queries * head_dim],
            lse: vec![T::from_f64(f64::NEG_INFINITY); n_queries],
            weights: keep_weights.then(Vec::new),
        }
    }

    pub fn output_row(&self, query: usize) -> &[T] {
        &self.output[query * self.head_dim..(query + 1) * self.head_dim]
    }

    pub fn weight_row(&self, query: usize) -> Option<&[T]> {
        self.weights
            .as_ref()
            .map(|w| &w[query * self.n_keys..(query + 1) * self.n_keys])
    }

    /// Per-key weight averaged over query rows; `None` if weights were not kept.
    pub fn mean_weights(&self) -> Option<Vec<f64>> {
        let w = self.weights.as_ref()?;
        let mut mean = vec![0.0f64; self.n_keys];
        if self.n_queries == 0 {
            return Some(mean);
        }
        for row in w.chunks_exact(self.n_keys.max(1)).take(self.n_queries) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x.to_f64();
            }
        }
        let inv = 1.0 / self.n_queries as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        Some(mean)
    }
}

/// Numerically stable `log(sum(exp(scores)))`; `-inf` for an empty slice.
pub fn logsumexp<T: Element>(scores: &[T]) -> T {
    let max = scores
        .iter()
        .map(|s| s.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return T::from_f64(f64::NEG_INFINITY);
    }
    let sum: f64 = scores.iter().map(|s| (s.to_f64() - max).exp()).sum();
    T::from_f64(max + sum.ln())
}

#[inline]
fn dot(a: &[impl Element], b: &[impl Element]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.to_f64() * y.to_f64()).sum()
}

/// Attention of one head: `queries` is `[n_q × head_dim]`, `keys` and
/// `values` are `[n_k × head_dim]`. Keys are visited in slice order, so the
/// reduction order is fixed.
pub fn attend_head<T: Element>(
    queries: &[T],
    keys: &[T],
    values: &[T],
    head_dim: usize,
    scale: f64,
    keep_weights: bool,
) -> Result<AttentionResult<T>> {
    if head_dim == 0 {
        return Err(contract("head_dim must be >= 1"));
    }
    if !queries.len().is_multiple_of(head_dim) {
        return Err(contract(format!(
            "query buffer of {} elements is not a multiple of head_dim {head_dim}",
            queries.len()
        )));
    }
    if !keys.len().is_multiple_of(head_dim) {
        return Err(contract(format!(
            "key buffer of {} elements is not a multiple of head_dim {head_dim}",
            keys.len()
        )));
    }
    check_len("value buffer length", keys.len(), values.len())?;

    let n_q = queries.len() / head_dim;
    let n_k = keys.len() / head_dim;
    if n_k == 0 {
        return Ok(AttentionResult::empty(n_q, head_dim, keep_weights));
    }

    let mut output = vec![T::default(); n_q * head_dim];
    let mut lse = Vec::with_capacity(n_q);
    let mut weights = keep_weights.then(|| Vec::with_capacity(n_q * n_k));
    let mut scores = vec![0.0f64; n_k];
    let mut acc = vec![0.0f64; head_dim];

    for (qi, q) in queries.chunks_exact(head_dim).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (s, k) in scores.iter_mut().zip(keys.chunks_exact(head_dim)) {
            *s = scale * dot(q, k);
            max = max.max(*s);
        }
        let mut sum = 0.0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        let inv = 1.0 / sum;

        acc.iter_mut().for_each(|a| *a = 0.0);
        for (e, v) in scores.iter().zip(values.chunks_exact(head_dim)) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += e * x.to_f64();
            }
        }
        for (o, a) in output[qi * head_dim..(qi + 1) * head_dim]
            .iter_mut()
            .zip(&acc)
        {
            *o = T::from_f64(a * inv);
        }
        lse.push(T::from_f64(max + sum.ln()));
        if let Some(w) = weights.as_mut() {
            w.extend(scores.iter().map(|e| T::from_f64(e * inv)));
        }
    }

    Ok(AttentionResult {
        n_queries: n_q,
        head_dim,
        n_keys: n_k,
        output,
        lse,
        weights,
    })
}

/// Multi-head attention over head-major buffers: `queries` is
/// `[heads × n_q × d]`, `keys`/`values` are `[heads × n_k × d]`.
pub fn attend<T: Element>(
    queries: &[T],
    keys: &[T],
    values: &[T],
    shape: &HeadShape,
    keep_weights: bool,
) -> Result<Vec<AttentionResult<T>>> {
    let h = shape.num_heads;
    let d = shape.head_dim;
    if !queries.len().is_multiple_of(h * d) || !keys.len().is_multiple_of(h * d) {
        return Err(contract(format!(
            "buffers are not multiples of heads*head_dim = {}",
            h * d
        )));
    }
    check_len("value buffer length", keys.len(), values.len())?;
    let q_per = queries.len() / h;
    let k_per = keys.len() / h;
    (0..h)
        .map(|head| {
            attend_head(
                &queries[head * q_per..(head + 1) * q_per],
                &keys[head * k_per..(head + 1) * k_per],
                &values[head * k_per..(head + 1) * k_per],
                d,
                shape.scale,
                keep_weights,
            )
        })
        .collect()
}

/// Fuses two partial results over disjoint key sets into the result over
/// their union. Weight rows, when both sides kept them, are concatenated
/// (`a`'s keys first) and rescaled to the merged partition function.
pub fn merge_states<T: Element>(
    a: &AttentionResult<T>,
    b: &AttentionResult<T>,
) -> Result<AttentionResult<T>> {
    check_len("merge query count", a.n_queries, b.n_queries)?;
    check_len("merge head_dim", a.head_dim, b.head_dim)?;
    let d = a.head_dim;
    let n_q = a.n_queries;
    let n_k = a.n_keys + b.n_keys;

    let mut output = vec![T::default(); n_q * d];
    let mut lse = Vec::with_capacity(n_q);
    let mut weights = match (&a.weights, &b.weights) {
        (Some(_), Some(_)) => Some(Vec::with_capacity(n_q * n_k)),
        _ => None,
    };

    for q in 0..n_q {
        let la = a.lse[q].to_f64();
        let lb = b.lse[q].to_f64();
        let max = la.max(lb);
        let out = &mut output[q * d..(q + 1) * d];
        if max == f64::NEG_INFINITY {
            lse.push(T::from_f64(f64::NEG_INFINITY));
            if let Some(w) = weights.as_mut() {
                w.extend(std::iter::repeat_n(T::default(), n_k));
            }
            continue;
        }
        let wa = (la - max).exp();
        let wb = (lb - max).exp();
        let z = wa + wb;
        let (ca, cb) = (wa / z, wb / z);
        for ((o, x), y) in out.iter_mut().zip(a.output_row(q)).zip(b.output_row(q)) {
            *o = T::from_f64(ca * x.to_f64() + cb * y.to_f64());
        }
        lse.push(T::from_f64(max + z.ln()));
        if let Some(w) = weights.as_mut() {
            let ra = a.weight_row(q).unwrap_or(&[]);
            let rb = b.weight_row(q).unwrap_or(&[]);
            w.extend(ra.iter().map(|x| T::from_f64(x.to_f64() * ca)));
            w.extend(rb.iter().map(|x| T::from_f64(x.to_f64() * cb)));
        }
    }

    Ok(AttentionResult {
        n_queries: n_q,
        head_dim: d,
        n_keys: n_k,
        output,
        lse,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Element-by-element softmax attention, written independently of the
    /// kernel (no max shift, no shared helpers).
    fn brute_force(q: &[f64], k: &[f64], v: &[f64], d: usize, scale: f64) -> (Vec<f64>, Vec<f64>) {
        let n_q = q.len() / d;
        let n_k = k.len() / d;
        let mut out = vec![0.0; n_q * d];
        let mut lse = vec![0.0; n_q];
        for i in 0..n_q {
            let mut z = 0.0;
            let mut e = vec![0.0; n_k];
            for j in 0..n_k {
                let mut s = 0.0;
                for c in 0..d {
                    s += q[i * d + c] * k[j * d + c];
                }
                e[j] = (scale * s).exp();
                z += e[j];
            }
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..n_k {
                    acc += e[j] / z * v[j * d + c];
                }
                out[i * d + c] = acc;
            }
            lse[i] = z.ln();
        }
        (out, lse)
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = [0.3f64, -1.2, 2.0];
        let k = [1.5f64, 0.5, -0.25];
        let v = [7.0f64, 8.0, 9.0];
        let r = attend_head(&q, &k, &v, 3, 0.5, true).unwrap();
        assert_eq!(r.weights.as_deref(), Some(&[1.0][..]));
        assert_eq!(r.output, v.to_vec());
        let expected = 0.5 * (0.3 * 1.5 - 1.2 * 0.5 - 2.0 * 0.25);
        assert!((r.lse[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let q = [1.0f64, 2.0];
        let k = [0.4f64, -0.1, 0.4, -0.1];
        let v = [1.0f64, 3.0, 5.0, -7.0];
        let r = attend_head(&q, &k, &v, 2, 1.0, true).unwrap();
        let w = r.weights.unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        assert!((r.output[0] - 3.0).abs() < 1e-15);
        assert!((r.output[1] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, scale) = (3, 1.0 / 3f64.sqrt());
        let q = random_matrix(&mut rng, 2, d);
        let k = random_matrix(&mut rng, 4, d);
        let v = random_matrix(&mut rng, 4, d);
        let r = attend_head(&q, &k, &v, d, scale, false).unwrap();
        let (out, lse) = brute_force(&q, &k, &v, d, scale);
        for (a, b) in r.output.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in r.lse.iter().zip(&lse) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_key_set_is_neg_infinity() {
        let r = attend_head::<f32>(&[1.0, 2.0], &[], &[], 2, 1.0, true).unwrap();
        assert_eq!(r.lse, vec![f32::NEG_INFINITY]);
        assert_eq!(r.output, vec![0.0, 0.0]);
        assert_eq!(r.n_keys, 0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(attend_head::<f32>(&[1.0, 2.0], &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2, 1.0, false).is_err());
        assert!(attend_head::<f32>(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0], 2, 1.0, false).is_err());
        let a = AttentionResult::<f32>::empty(1, 2, false);
        let b = AttentionResult::<f32>::empty(2, 2, false);
        assert!(merge_states(&a, &b).is_err());
        assert!(HeadShape::new(0, 4).is_err());
        assert!(HeadShape::with_scale(1, 4, 0.0).is_err());
    }

    #[test]
    fn logsumexp_cases() {
        assert_eq!(logsumexp(&[0.0f64]), 0.0);
        let x = -3.25f64;
        assert!((logsumexp(&[x, x]) - (x + std::f64::consts::LN_2)).abs() < 1e-15);
        let big = logsumexp(&[1000.0f64, 1000.5]);
        assert!(big.is_finite());
        assert!((big - (1000.5 + (1.0 + (-0.5f64).exp()).ln())).abs() < 1e-12);
        assert_eq!(logsumexp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn merge_with_empty_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_matrix(&mut rng, 3, 4);
        let k = random_matrix(&mut rng, 5, 4);
        let v = random_matrix(&mut rng, 5, 4);
        let a = attend_head(&q, &k, &v, 4, 0.5, false).unwrap();
        let e = AttentionResult::empty(3, 4, false);
        let m = merge_states(&a, &e).unwrap();
        assert_eq!(m.output, a.output);
        assert_eq!(m.lse, a.lse);
        let m = merge_states(&e, &a).unwrap();
        assert_eq!(m.output, a.output);
        let both_empty = merge_states(&e, &e).unwrap();
        assert_eq!(both_empty.lse, vec![f64::NEG_INFINITY; 3]);
        assert!(both_empty.output.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn merging_a_result_with_itself_doubles_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_matrix(&mut rng, 2, 4);
        let k = random_matrix(&mut rng, 6, 4);
        let v = random_matrix(&mut rng, 6, 4);
        let a = attend_head(&q, &k, &v, 4, 0.5, false).unwrap();
        let m = merge_states(&a, &a).unwrap();
        for (x, y) in m.output.iter().zip(&a.output) {
            assert!((x - y).abs() < 1e-15);
        }
        for (x, y) in m.lse.iter().zip(&a.lse) {
            assert!((x - (y + std::f64::consts::LN_2)).abs() < 1e-14);
        }
    }

    #[test]
    fn split_of_eight_keys_merges_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 5;
        let q = random_matrix(&mut rng, 2, d);
        let k = random_matrix(&mut rng, 8, d);
        let v = random_matrix(&mut rng, 8, d);
        let (full_out, full_lse) = brute_force(&q, &k, &v, d, 0.7);
        let a = attend_head(&q, &k[..5 * d], &v[..5 * d], d, 0.7, true).unwrap();
        let b = attend_head(&q, &k[5 * d..], &v[5 * d..], d, 0.7, true).unwrap();
        let m = merge_states(&a, &b).unwrap();
        for (x, y) in m.output.iter().zip(&full_out) {
            assert!((x - y).abs() < 1e-10);
        }
        for (x, y) in m.lse.iter().zip(&full_lse) {
            assert!((x - y).abs() < 1e-10);
        }
        let full = attend_head(&q, &k, &v, d, 0.7, true).unwrap();
        for (x, y) in m.weights.unwrap().iter().zip(full.weights.unwrap().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn large_scores_stay_finite() {
        let q = [100.0f32, 0.0];
        let k = [100.0f32, 0.0, -100.0, 0.0, 99.0, 1.0];
        let v = [1.0f32, 0.0, 0.0, 1.0, 0.5, 0.5];
        let r = attend_head(&q, &k, &v, 2, 1.0, true).unwrap();
        assert!(r.lse[0].is_finite());
        assert!(r.output.iter().all(|x| x.is_finite()));
        let a = attend_head(&q, &k[..2], &v[..2], 2, 1.0, false).unwrap();
        let b = attend_head(&q, &k[2..], &v[2..], 2, 1.0, false).unwrap();
        let m = merge_states(&a, &b).unwrap();
        assert!(m.output.iter().all(|x| x.is_finite()));
        assert!((m.lse[0] - r.lse[0]).abs() <= 1e-3 * r.lse[0].abs());
    }

    #[test]
    fn multi_head_layout() {
        let shape = HeadShape::with_scale(2, 2, 1.0).unwrap();
        // head 0 sees one key, head 1 sees one key; outputs are the values.
        let q = [1.0f64, 0.0, 0.0, 1.0];
        let k = [1.0f64, 1.0, 2.0, 2.0];
        let v = [3.0f64, 4.0, 5.0, 6.0];
        let r = attend(&q, &k, &v, &shape, false).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].output, vec![3.0, 4.0]);
        assert_eq!(r[1].output, vec![5.0, 6.0]);
        assert!((r[1].lse[0] - 2.0).abs() < 1e-15);
    }

    fn instance() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
        (1usize..4, 1usize..17, 1usize..40, 0usize..40, any::<u64>())
            .prop_map(|(n_q, d, n, cut, seed)| (n_q, d, n, cut % (n + 1), seed))
    }

    proptest! {
        #[test]
        fn merge_of_partition_equals_union((n_q, d, n, cut, seed) in instance()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, n_q, d);
            let k: Vec<f64> = random_matrix(&mut rng, n, d).iter().map(|x| 3.0 * x).collect();
            let v = random_matrix(&mut rng, n, d);
            let scale = 1.0 / (d as f64).sqrt();
            let full = attend_head(&q, &k, &v, d, scale, false).unwrap();
            let a = attend_head(&q, &k[..cut * d], &v[..cut * d], d, scale, false).unwrap();
            let b = attend_head(&q, &k[cut * d..], &v[cut * d..], d, scale, false).unwrap();
            let m = merge_states(&a, &b).unwrap();
            for (x, y) in m.output.iter().zip(&full.output) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            for (x, y) in m.lse.iter().zip(&full.lse) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn merge_order_does_not_matter(seed in any::<u64>(), n in 3usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let q = random_matrix(&mut rng, 2, d);
            let k = random_matrix(&mut rng, n, d);
            let v = random_matrix(&mut rng, n, d);
            let c1 = rng.random_range(0..n);
            let c2 = rng.random_range(c1..=n);
            let part = |lo: usize, hi: usize| {
                attend_head(&q, &k[lo * d..hi * d], &v[lo * d..hi * d], d, 0.5, false).unwrap()
            };
            let (a, b, c) = (part(0, c1), part(c1, c2), part(c2, n));
            let left = merge_states(&merge_states(&a, &b).unwrap(), &c).unwrap();
            let right = merge_states(&a, &merge_states(&c, &b).unwrap()).unwrap();
            let swapped = merge_states(&merge_states(&c, &a).unwrap(), &b).unwrap();
            for ((x, y), z) in left.output.iter().zip(&right.output).zip(&swapped.output) {
                prop_assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
            }
            for ((x, y), z) in left.lse.iter().zip(&right.lse).zip(&swapped.lse) {
                prop_assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
            }
        }

        #[test]
        fn weight_rows_are_normalized(seed in any::<u64>(), n in 1usize..64, mag in 0.0f32..1e4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 3;
            let q: Vec<f32> = (0..2 * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let k: Vec<f32> = (0..n * d).map(|_| mag * rng.random_range(-1.0f32..1.0)).collect();
            let v: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let r = attend_head(&q, &k, &v, d, 1.0, true).unwrap();
            prop_assert!(r.output.iter().all(|x| x.is_finite()));
            prop_assert!(r.lse.iter().all(|x| x.is_finite()));
            for row in 0..2 {
                let s: f64 = r.weight_row(row).unwrap().iter().map(|w| *w as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
