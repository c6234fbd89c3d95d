//! 64-bit full-attention reference.
//!
//! Deliberately separate from `attention_math`: a plain two-pass softmax
//! (max, then exponentials) over the whole history, with no blocking,
//! merging or online rescaling.

/// Exact attention of one query row over a history.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub output: Vec<f64>,
    pub lse: f64,
    /// Softmax weight of every history entry, in history order.
    pub weights: Vec<f64>,
}

/// Attends `query` (`[head_dim]`) to `keys`/`values` (`[n × head_dim]`).
/// An empty history yields a zero output, `lse = -inf` and no weights.
pub fn full_attention_oracle(query: &[f32], keys: &[f64], values: &[f64], head_dim: usize, scale: f64) -> OracleRow {
    assert_eq!(query.len(), head_dim, "query width");
    assert_eq!(keys.len(), values.len(), "history key/value size");
    let n = keys.len() / head_dim.max(1);
    if n == 0 {
        return OracleRow {
            output: vec![0.0; head_dim],
            lse: f64::NEG_INFINITY,
            weights: Vec::new(),
        };
    }
    let q: Vec<f64> = query.iter().map(|x| f64::from(*x)).collect();
    let scores: Vec<f64> = keys
        .chunks_exact(head_dim)
        .map(|k| scale * k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let mut output = vec![0.0; head_dim];
    for (w, v) in weights.iter().zip(values.chunks_exact(head_dim)) {
        for (o, x) in output.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    OracleRow {
        output,
        lse: max + z.ln(),
        weights,
    }
}

/// Entire KV history of one layer, widened to 64 bits, per head.
#[derive(Debug, Clone)]
pub struct OracleHistory {
    head_dim: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl OracleHistory {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        Self {
            head_dim,
            keys: vec![Vec::new(); num_heads],
            values: vec![Vec::new(); num_heads],
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.len() / self.head_dim)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Appends `[heads × n × head_dim]` keys and values.
    pub fn extend(&mut self, keys: &[f32], values: &[f32]) {
        let per_head = keys.len() / self.keys.len();
        for (h, (ks, vs)) in self.keys.iter_mut().zip(self.values.iter_mut()).enumerate() {
            let r = h * per_head..(h + 1) * per_head;
            ks.extend(keys[r.clone()].iter().map(|x| f64::from(*x)));
            vs.extend(values[r].iter().map(|x| f64::from(*x)));
        }
    }

    pub fn keys(&self, head: usize) -> &[f64] {
        &self.keys[head]
    }

    pub fn values(&self, head: usize) -> &[f64] {
        &self.values[head]
    }

    /// Per-component `max_j |V_j[c]|` of `head` over the whole history.
    pub fn max_abs_value(&self, head: usize) -> Vec<f64> {
        let mut m = vec![0.0f64; self.head_dim];
        for v in self.values[head].chunks_exact(self.head_dim) {
            for (a, x) in m.iter_mut().zip(v) {
                *a = a.max(x.abs());
            }
        }
        m
    }

    pub fn attend(&self, head: usize, query: &[f32], scale: f64) -> OracleRow {
        full_attention_oracle(query, &self.keys[head], &self.values[head], self.head_dim, scale)
    }
}
