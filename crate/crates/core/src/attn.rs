//! Idealized QK scoring: per-head bilinear scores without scaling, max or
//! log-sum-exp aggregation over heads, and threshold / softmax edge rules.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::construct::AttentionParams;
use crate::embed::EmbeddingMatrix;
use crate::error::{invalid, Result, RgrError};

/// An ordered tuple of distinct vertex ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context {
    indices: Vec<usize>,
}

impl Context {
    pub fn new(indices: Vec<usize>, m: usize) -> Result<Self> {
        if indices.is_empty() || indices.len() > m {
            return invalid(format!("context length {} outside 1..={m}", indices.len()));
        }
        let mut seen = vec![false; m];
        for &v in &indices {
            if v >= m {
                return invalid(format!("context index {v} out of range for m = {m}"));
            }
            if seen[v] {
                return invalid(format!("context repeats vertex {v}"));
            }
            seen[v] = true;
        }
        Ok(Self { indices })
    }

    pub(crate) fn from_unchecked(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-head ℓ×ℓ score matrices for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    pub per_head: Vec<Array2<f64>>,
}

impl ScoreTensor {
    pub fn heads(&self) -> usize {
        self.per_head.len()
    }

    pub fn len(&self) -> usize {
        self.per_head.first().map_or(0, |s| s.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_shapes(params: &AttentionParams, x: &EmbeddingMatrix) -> Result<()> {
    if params.d_model() != x.d_model() {
        return invalid(format!(
            "params expect d_model = {} but embedding has {}",
            params.d_model(),
            x.d_model()
        ));
    }
    Ok(())
}

/// S^{(k)} = (X_C W_Q^{(k)}) (X_C W_K^{(k)})ᵀ for every head.
pub fn head_scores(params: &AttentionParams, x: &EmbeddingMatrix, c: &Context) -> Result<ScoreTensor> {
    check_shapes(params, x)?;
    if let Some(&bad) = c.indices().iter().find(|&&v| v >= x.m()) {
        return invalid(format!("context index {bad} out of range for m = {}", x.m()));
    }
    let xc = x.rows.select(Axis(0), c.indices());
    let q = xc.dot(&params.w_q);
    let k = xc.dot(&params.w_k);
    let d_k = params.d_k;
    let per_head = (0..params.heads)
        .map(|h| {
            let cols = s![.., h * d_k..(h + 1) * d_k];
            q.slice(cols).dot(&k.slice(cols).t())
        })
        .collect();
    Ok(ScoreTensor { per_head })
}

/// Score of head `k` for the ordered pair (i, j) over the full vertex set.
pub fn pair_score(params: &AttentionParams, x: &EmbeddingMatrix, i: usize, j: usize, k: usize) -> f64 {
    let q = x.row(i).dot(&params.head_q(k));
    let key = x.row(j).dot(&params.head_k(k));
    q.dot(&key)
}

/// S^max over all m×m ordered pairs (diagonal included).
pub fn full_score_max(params: &AttentionParams, x: &EmbeddingMatrix) -> Result<Array2<f64>> {
    check_shapes(params, x)?;
    let q = x.rows.dot(&params.w_q);
    let k = x.rows.dot(&params.w_k);
    let d_k = params.d_k;
    let m = x.m();
    let mut best = Array2::from_elem((m, m), f64::NEG_INFINITY);
    for h in 0..params.heads {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let scores = q.slice(cols).dot(&k.slice(cols).t());
        ndarray::Zip::from(&mut best).and(&scores).for_each(|b, &v| {
            if v > *b {
                *b = v;
            }
        });
    }
    if params.heads == 0 {
        best.fill(0.0);
    }
    Ok(best)
}

pub fn aggregate_max(t: &ScoreTensor) -> Array2<f64> {
    let mut out = t.per_head[0].clone();
    for head in &t.per_head[1..] {
        ndarray::Zip::from(&mut out).and(head).for_each(|o, &v| *o = o.max(v));
    }
    out
}

/// Elementwise log Σ_k exp(S^{(k)}), stabilized by the per-entry max.
pub fn aggregate_lse(t: &ScoreTensor) -> Array2<f64> {
    let max = aggregate_max(t);
    let mut acc = Array2::<f64>::zeros(max.raw_dim());
    for head in &t.per_head {
        ndarray::Zip::from(&mut acc)
            .and(head)
            .and(&max)
            .for_each(|a, &v, &mx| *a += (v - mx).exp());
    }
    ndarray::Zip::from(&mut acc).and(&max).for_each(|a, &mx| *a = mx + a.ln());
    acc
}

/// Edge iff aggregated score is strictly above τ; self-pairs are never edges.
pub fn decide_edges(agg: ArrayView2<f64>, tau: f64) -> Array2<bool> {
    let mut out = agg.mapv(|v| v > tau);
    out.diag_mut().fill(false);
    out
}

/// Row-wise softmax over the whole context row (self included) of the
/// max-aggregated scores; edge iff the weight reaches `tau_hat`.
pub fn softmax_decide(t: &ScoreTensor, c: &Context, tau_hat: f64) -> Result<Array2<bool>> {
    if !(tau_hat > 0.0 && tau_hat < 1.0) {
        return invalid(format!("softmax threshold must lie in (0, 1), got {tau_hat}"));
    }
    if t.len() != c.len() {
        return invalid(format!("score tensor has {} rows but the context has {}", t.len(), c.len()));
    }
    let weights = softmax_rows(&aggregate_max(t));
    let mut out = weights.mapv(|a| a >= tau_hat);
    out.diag_mut().fill(false);
    Ok(out)
}

pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

/// Lower bound 1 / (Δ + (ℓ − Δ) e^{−γ}) on a true edge's softmax weight.
pub fn softmax_margin_bound(gamma: f64, delta: usize, ell: usize) -> Result<f64> {
    if delta < 1 || ell < delta {
        return invalid(format!("need ell >= delta >= 1, got delta = {delta}, ell = {ell}"));
    }
    Ok(1.0 / (delta as f64 + (ell - delta) as f64 * (-gamma).exp()))
}

/// The four parts of a constructed head's score at (i, j):
/// `q_i = 1[i∈V_k] w_{π(i)} + a_i` and `k_j = 1[j∈T_k] w_j + b_j`, with
/// `a_i = Σ_{s∈V_k} δ_i(s) w_{π(s)}` and `b_j = Σ_{t∈T_k} δ_j(t) w_t`.
/// Signal is the product of the one-hot parts, N1 = signal query · b_j,
/// N2 = a_i · signal key, N3 = a_i · b_j.
///
/// For Bernoulli signatures the same split is reported; there the signal of
/// a true edge is the signature popcount rather than d_k.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDecomposition {
    pub signal: f64,
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
    pub head: usize,
}

impl ScoreDecomposition {
    pub fn total(&self) -> f64 {
        self.signal + self.n1 + self.n2 + self.n3
    }
}

pub fn score_decomposition(
    params: &AttentionParams,
    x: &EmbeddingMatrix,
    i: usize,
    j: usize,
    k: usize,
) -> Result<ScoreDecomposition> {
    let trace = params
        .trace
        .as_ref()
        .ok_or_else(|| RgrError::Unsupported("score decomposition needs a construction trace".into()))?;
    let m = x.m();
    if i >= m || j >= m {
        return invalid(format!("pair ({i}, {j}) out of range for m = {m}"));
    }
    let Some(block) = trace.blocks.get(k) else {
        return invalid(format!("head {k} out of range ({} heads)", trace.blocks.len()));
    };
    let w = &trace.signatures;
    let d_k = w.ncols();
    let inv_mu = trace.mu.recip();

    // δ_v(s) = (1/μ)⟨x_v, x_s⟩ − 1[v = s]
    let leak = |v: usize, s: usize| {
        let g = x.row(v).dot(&x.row(s)) * inv_mu;
        if v == s { g - 1.0 } else { g }
    };

    let mut a_i = Array1::<f64>::zeros(d_k);
    let mut b_j = Array1::<f64>::zeros(d_k);
    for &(src, tgt) in &block.pairs {
        a_i.scaled_add(leak(i, src), &w.row(tgt));
        b_j.scaled_add(leak(j, tgt), &w.row(tgt));
    }
    let q_sig = block.target_of(i).map(|t| w.row(t).to_owned());
    let k_sig = block.has_target(j).then(|| w.row(j).to_owned());

    let signal = match (&q_sig, &k_sig) {
        (Some(q), Some(kv)) => q.dot(kv),
        _ => 0.0,
    };
    let n1 = q_sig.as_ref().map_or(0.0, |q| q.dot(&b_j));
    let n2 = k_sig.as_ref().map_or(0.0, |kv| a_i.dot(kv));
    let n3 = a_i.dot(&b_j);
    Ok(ScoreDecomposition { signal, n1, n2, n3, head: k })
}
