//! Transformer layer primitives: ReLU attention with 1/nTokens
//! normalization, the residual MLP, and the element-wise multiplication
//! layer that keeps only diagonal scores.
//!
//! Weights are stored sparse (the constructions touch a handful of
//! coordinates per head); dense matrix-form evaluators are provided for
//! cross-checks. Zero weights make every primitive the identity map by the
//! residual structure.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::{Error, Result};

/// Sparse D1 x D2 matrix in triplet form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMat {
    pub rows: usize,
    pub cols: usize,
    /// (row, col, value) triplets; duplicates add.
    pub entries: Vec<(u32, u32, f64)>,
}

impl SparseMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        SparseMat {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        if v != 0.0 {
            self.entries.push((r as u32, c as u32, v));
        }
    }

    pub fn from_dense(m: &Array2<f64>) -> Self {
        let mut out = SparseMat::zeros(m.nrows(), m.ncols());
        for ((r, c), v) in m.indexed_iter() {
            out.push(r, c, *v);
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows, self.cols));
        for &(r, c, v) in &self.entries {
            m[(r as usize, c as usize)] += v;
        }
        m
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        y.fill(0.0);
        for &(r, c, v) in &self.entries {
            y[r as usize] += v * x[c as usize];
        }
    }

    /// y = A^T x
    pub fn mul_vec_transposed(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.fill(0.0);
        for &(r, c, v) in &self.entries {
            y[c as usize] += v * x[r as usize];
        }
    }

    /// Induced 1-norm: max absolute column sum.
    pub fn induced_one_norm(&self) -> f64 {
        let mut col_sums = vec![0.0f64; self.cols];
        for &(_, c, v) in &self.entries {
            col_sums[c as usize] += v.abs();
        }
        col_sums.into_iter().fold(0.0, f64::max)
    }

    /// Spectral norm by power iteration on A^T A (informational).
    pub fn spectral_norm(&self, iterations: usize) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        let mut x = vec![1.0 / (self.cols as f64).sqrt(); self.cols];
        let mut ax = vec![0.0; self.rows];
        let mut atax = vec![0.0; self.cols];
        let mut sigma = 0.0;
        for _ in 0..iterations {
            self.mul_vec(&x, &mut ax);
            self.mul_vec_transposed(&ax, &mut atax);
            let norm = atax.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            for (xi, vi) in x.iter_mut().zip(&atax) {
                *xi = vi / norm;
            }
            sigma = norm.sqrt();
        }
        sigma
    }

    /// Product A^T B as triplets (used to collapse head score forms).
    pub fn transpose_mul(&self, other: &SparseMat) -> SparseMat {
        debug_assert_eq!(self.rows, other.rows);
        let mut by_row: Vec<Vec<(u32, f64)>> = vec![Vec::new(); other.rows];
        for &(r, c, v) in &other.entries {
            by_row[r as usize].push((c, v));
        }
        let mut out = SparseMat::zeros(self.cols, other.cols);
        for &(r, c, v) in &self.entries {
            for &(c2, v2) in &by_row[r as usize] {
                out.entries.push((c, c2, v * v2));
            }
        }
        out.coalesce();
        out
    }

    fn coalesce(&mut self) {
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut packed: Vec<(u32, u32, f64)> = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            match packed.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => packed.push((r, c, v)),
            }
        }
        packed.retain(|&(_, _, v)| v != 0.0);
        self.entries = packed;
    }
}

/// Scalar function applied to raw attention scores. `Relu` is the layer
/// definition; the other variants are the diagnostic exact hooks that replace
/// a whole sum-of-ReLUs head group by one head evaluating the target function
/// directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFn {
    Relu,
    ActivationValue(Activation),
    ActivationDerivative(Activation),
}

impl ScoreFn {
    #[inline]
    pub fn apply(&self, t: f64) -> f64 {
        match self {
            ScoreFn::Relu => t.max(0.0),
            ScoreFn::ActivationValue(a) => a.value(t),
            ScoreFn::ActivationDerivative(a) => a.derivative(t),
        }
    }

    pub fn is_relu(&self) -> bool {
        matches!(self, ScoreFn::Relu)
    }
}

/// One attention head (Q, K, V).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnHead {
    pub q: SparseMat,
    pub k: SparseMat,
    pub v: SparseMat,
    #[serde(default = "default_score")]
    pub score: ScoreFn,
}

fn default_score() -> ScoreFn {
    ScoreFn::Relu
}

impl AttnHead {
    pub fn relu(q: SparseMat, k: SparseMat, v: SparseMat) -> Self {
        AttnHead {
            q,
            k,
            v,
            score: ScoreFn::Relu,
        }
    }
}

/// H' = H + (1/nTokens) sum_m (V_m H) score((Q_m H)^T (K_m H)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnLayer {
    pub heads: Vec<AttnHead>,
}

/// H' = H + W2 relu(W1 H), per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    pub w1: SparseMat,
    pub w2: SparseMat,
}

/// One multiplication head; the score has no nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmlHead {
    pub q: SparseMat,
    pub k: SparseMat,
    pub v: SparseMat,
}

/// H' = H + sum_m (V_m H) gamma((Q_m H)^T (K_m H)) where gamma keeps only the
/// diagonal: token i gains sum_m <Q_m h_i, K_m h_i> V_m h_i. No token-count
/// normalization and no cross-token terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwmlLayer {
    pub heads: Vec<EwmlHead>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Attn,
    Mlp,
    Ewml,
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerKind::Attn => write!(f, "attn"),
            LayerKind::Mlp => write!(f, "mlp"),
            LayerKind::Ewml => write!(f, "ewml"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerWeights {
    Attn(AttnLayer),
    Mlp(MlpLayer),
    Ewml(EwmlLayer),
}

impl LayerWeights {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerWeights::Attn(_) => LayerKind::Attn,
            LayerWeights::Mlp(_) => LayerKind::Mlp,
            LayerWeights::Ewml(_) => LayerKind::Ewml,
        }
    }

    pub fn forward(&self, h: &Array2<f64>) -> Result<Array2<f64>> {
        match self {
            LayerWeights::Attn(l) => attn_forward(h, l),
            LayerWeights::Mlp(l) => mlp_forward(h, l),
            LayerWeights::Ewml(l) => ewml_forward(h, l),
        }
    }
}

fn check_square(dim: usize, m: &SparseMat, what: &str) -> Result<()> {
    if m.rows != dim || m.cols != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: m.rows,
            context: what.into(),
        });
    }
    Ok(())
}

/// Per-token attention forward pass. Scores are computed densely over all
/// token pairs; head score forms Q^T K are collapsed once per head.
pub fn attn_forward(h: &Array2<f64>, layer: &AttnLayer) -> Result<Array2<f64>> {
    let tokens = h.ncols();
    let dim = h.nrows();
    let mut out = h.clone();
    let inv = 1.0 / tokens as f64;
    let cols: Vec<Vec<f64>> = (0..tokens).map(|i| h.column(i).to_vec()).collect();
    let mut vh = vec![0.0; dim];
    for head in &layer.heads {
        check_square(dim, &head.q, "attention head Q")?;
        check_square(dim, &head.k, "attention head K")?;
        check_square(dim, &head.v, "attention head V")?;
        // collapse the bilinear score form once: score(i, s) = h_i^T (Q^T K) h_s
        let m = head.q.transpose_mul(&head.k);
        let mut mh: Vec<Vec<f64>> = Vec::with_capacity(tokens);
        for col in &cols {
            let mut y = vec![0.0; m.rows];
            m.mul_vec(col, &mut y);
            mh.push(y);
        }
        for s in 0..tokens {
            head.v.mul_vec(&cols[s], &mut vh);
            if vh.iter().all(|v| *v == 0.0) {
                continue;
            }
            for i in 0..tokens {
                // <h_i, M h_s>
                let score: f64 = cols[i].iter().zip(&mh[s]).map(|(a, b)| a * b).sum();
                let weight = head.score.apply(score) * inv;
                if weight == 0.0 {
                    continue;
                }
                for (r, v) in vh.iter().enumerate() {
                    if *v != 0.0 {
                        out[(r, i)] += weight * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Dense matrix-form attention. With S = (Q H)^T (K H), token i gains
/// (1/T) sum_s f(S[i, s]) V h_s, i.e. H + (1/T) (V H) f(S)^T; the transpose
/// makes the matrix product agree with the per-token form (query taken from
/// the destination token).
pub fn attn_forward_dense(h: &Array2<f64>, layer: &AttnLayer) -> Result<Array2<f64>> {
    let tokens = h.ncols() as f64;
    let mut out = h.clone();
    for head in &layer.heads {
        let q = head.q.to_dense();
        let k = head.k.to_dense();
        let v = head.v.to_dense();
        let scores = (q.dot(h)).t().dot(&k.dot(h)).mapv(|t| head.score.apply(t));
        out = out + v.dot(h).dot(&scores.t()).mapv(|t| t / tokens);
    }
    Ok(out)
}

/// Per-token MLP forward pass: h + W2 relu(W1 h).
pub fn mlp_forward(h: &Array2<f64>, layer: &MlpLayer) -> Result<Array2<f64>> {
    if layer.w1.cols != h.nrows() || layer.w2.rows != h.nrows() || layer.w2.cols != layer.w1.rows {
        return Err(Error::DimensionMismatch {
            expected: h.nrows(),
            got: layer.w1.cols,
            context: "mlp weights".into(),
        });
    }
    let tokens = h.ncols();
    let mut out = h.clone();
    let mut hidden = vec![0.0; layer.w1.rows];
    let mut delta = vec![0.0; layer.w2.rows];
    for i in 0..tokens {
        let col = h.column(i).to_vec();
        layer.w1.mul_vec(&col, &mut hidden);
        for v in &mut hidden {
            *v = v.max(0.0);
        }
        layer.w2.mul_vec(&hidden, &mut delta);
        for (r, v) in delta.iter().enumerate() {
            if *v != 0.0 {
                out[(r, i)] += v;
            }
        }
    }
    Ok(out)
}

/// Per-token element-wise multiplication forward: token i gains
/// sum_m <Q_m h_i, K_m h_i> V_m h_i.
pub fn ewml_forward(h: &Array2<f64>, layer: &EwmlLayer) -> Result<Array2<f64>> {
    let tokens = h.ncols();
    let dim = h.nrows();
    let mut out = h.clone();
    let mut vh = vec![0.0; dim];
    let mut mh = vec![0.0; dim];
    for head in &layer.heads {
        check_square(dim, &head.q, "ewml head Q")?;
        check_square(dim, &head.k, "ewml head K")?;
        check_square(dim, &head.v, "ewml head V")?;
        let m = head.q.transpose_mul(&head.k);
        for i in 0..tokens {
            let col = h.column(i).to_vec();
            m.mul_vec(&col, &mut mh);
            let score: f64 = col.iter().zip(&mh).map(|(a, b)| a * b).sum();
            if score == 0.0 {
                continue;
            }
            head.v.mul_vec(&col, &mut vh);
            for (r, v) in vh.iter().enumerate() {
                if *v != 0.0 {
                    out[(r, i)] += score * v;
                }
            }
        }
    }
    Ok(out)
}

/// Definitional softmax-attention evaluator (out of the construction's
/// scope; nothing is built on it). Token i gains
/// sum_m sum_s softmax_s(<Q_m h_i, K_m h_s>) V_m h_s.
pub fn softmax_attn_forward(h: &Array2<f64>, layer: &AttnLayer) -> Result<Array2<f64>> {
    let tokens = h.ncols();
    let mut out = h.clone();
    for head in &layer.heads {
        let weights = softmax_scores(h, head)?;
        let vh = head.v.to_dense().dot(h);
        for i in 0..tokens {
            for s in 0..tokens {
                let a = weights[(i, s)];
                for r in 0..h.nrows() {
                    out[(r, i)] += a * vh[(r, s)];
                }
            }
        }
    }
    Ok(out)
}

/// Row-stochastic softmax score matrix of one head; row i holds token i's
/// attention distribution over source tokens.
pub fn softmax_scores(h: &Array2<f64>, head: &AttnHead) -> Result<Array2<f64>> {
    let tokens = h.ncols();
    let dim = h.nrows();
    check_square(dim, &head.q, "softmax head Q")?;
    check_square(dim, &head.k, "softmax head K")?;
    let m = head.q.transpose_mul(&head.k);
    let mut scores = Array2::<f64>::zeros((tokens, tokens));
    let cols: Vec<Vec<f64>> = (0..tokens).map(|i| h.column(i).to_vec()).collect();
    let mut mh = vec![0.0; dim];
    for s in 0..tokens {
        m.mul_vec(&cols[s], &mut mh);
        for i in 0..tokens {
            scores[(i, s)] = cols[i].iter().zip(&mh).map(|(a, b)| a * b).sum();
        }
    }
    for i in 0..tokens {
        let row_max = (0..tokens).fold(f64::NEG_INFINITY, |m, s| m.max(scores[(i, s)]));
        let mut total = 0.0;
        for s in 0..tokens {
            let e = (scores[(i, s)] - row_max).exp();
            scores[(i, s)] = e;
            total += e;
        }
        for s in 0..tokens {
            scores[(i, s)] /= total;
        }
    }
    Ok(scores)
}

/// Layer parameter norm with induced 1-norms:
/// attention/MLP: max_m {||Q||_1, ||K||_1} + sum_m ||V||_1 + ||W1||_1 + ||W2||_1
/// (absent parts contribute 0); EWML: max over heads of the three norms.
pub fn param_norm(layer: &LayerWeights) -> f64 {
    match layer {
        LayerWeights::Attn(l) => {
            let qk = l
                .heads
                .iter()
                .map(|h| h.q.induced_one_norm().max(h.k.induced_one_norm()))
                .fold(0.0, f64::max);
            let vs: f64 = l.heads.iter().map(|h| h.v.induced_one_norm()).sum();
            qk + vs
        }
        LayerWeights::Mlp(l) => l.w1.induced_one_norm() + l.w2.induced_one_norm(),
        LayerWeights::Ewml(l) => l
            .heads
            .iter()
            .map(|h| {
                h.q.induced_one_norm()
                    .max(h.k.induced_one_norm())
                    .max(h.v.induced_one_norm())
            })
            .fold(0.0, f64::max),
    }
}

/// Dense matrix-form EWML: H + sum_m (V_m H) gamma(S); gamma keeps only the
/// diagonal, so the transpose question does not arise.
pub fn ewml_forward_dense(h: &Array2<f64>, layer: &EwmlLayer) -> Result<Array2<f64>> {
    let tokens = h.ncols();
    let mut out = h.clone();
    for head in &layer.heads {
        let q = head.q.to_dense();
        let k = head.k.to_dense();
        let v = head.v.to_dense();
        let scores = (q.dot(h)).t().dot(&k.dot(h));
        let vh = v.dot(h);
        for i in 0..tokens {
            let diag = scores[(i, i)];
            for r in 0..h.nrows() {
                out[(r, i)] += diag * vh[(r, i)];
            }
        }
    }
    Ok(out)
}

/// Spectral-norm variant of `param_norm`, reported informationally.
pub fn param_norm_spectral(layer: &LayerWeights) -> f64 {
    const ITERS: usize = 60;
    match layer {
        LayerWeights::Attn(l) => {
            let qk = l
                .heads
                .iter()
                .map(|h| h.q.spectral_norm(ITERS).max(h.k.spectral_norm(ITERS)))
                .fold(0.0, f64::max);
            let vs: f64 = l.heads.iter().map(|h| h.v.spectral_norm(ITERS)).sum();
            qk + vs
        }
        LayerWeights::Mlp(l) => l.w1.spectral_norm(ITERS) + l.w2.spectral_norm(ITERS),
        LayerWeights::Ewml(l) => l
            .heads
            .iter()
            .map(|h| {
                h.q.spectral_norm(ITERS)
                    .max(h.k.spectral_norm(ITERS))
                    .max(h.v.spectral_norm(ITERS))
            })
            .fold(0.0, f64::max),
    }
}
