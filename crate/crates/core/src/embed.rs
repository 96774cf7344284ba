//! Item embeddings, the scaled-transpose approximate inverse, and exact
//! measurement of restricted self-incoherence constants.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{purpose, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EmbeddingKind {
    OneHot,
    GaussianUnitNorm,
    SparseBinary {
        #[serde(rename = "p_B")]
        p_b: f64,
    },
}

impl EmbeddingKind {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingKind::OneHot => "one-hot",
            EmbeddingKind::GaussianUnitNorm => "gaussian-unit-norm",
            EmbeddingKind::SparseBinary { .. } => "sparse-binary",
        }
    }
}

/// `m` item embeddings of width `d_model`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: Array2<f64>,
    pub kind: EmbeddingKind,
    pub seed: Option<u64>,
}

impl EmbeddingMatrix {
    pub fn m(&self) -> usize {
        self.rows.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    /// Natural scale of the Gram diagonal: 1 for one-hot and GUN rows,
    /// `d_model * p_B` for sparse binary rows.
    pub fn default_mu(&self) -> f64 {
        match self.kind {
            EmbeddingKind::SparseBinary { p_b } => self.d_model() as f64 * p_b,
            _ => 1.0,
        }
    }

    /// Leakage matrix Δ = (1/μ) X Xᵀ − I; row i is δ_i.
    pub fn leakage(&self, mu: f64) -> Result<Array2<f64>> {
        if !(mu > 0.0) {
            return invalid(format!("mu must be positive, got {mu}"));
        }
        let mut g = self.rows.dot(&self.rows.t());
        g.mapv_inplace(|v| v / mu);
        for i in 0..self.m() {
            g[[i, i]] -= 1.0;
        }
        Ok(g)
    }
}

pub fn gen_one_hot(m: usize) -> Result<EmbeddingMatrix> {
    if m == 0 {
        return invalid("one-hot embedding needs m >= 1");
    }
    Ok(EmbeddingMatrix { rows: Array2::eye(m), kind: EmbeddingKind::OneHot, seed: None })
}

/// Rows drawn from N(0, I/d_model) and then L2-normalized.
pub fn gen_gaussian_unit_norm(m: usize, d_model: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if d_model == 0 {
        return invalid("d_model must be at least 1");
    }
    let mut rng = stream(seed, purpose::EMBEDDING);
    let scale = (d_model as f64).sqrt().recip();
    let mut rows = Array2::<f64>::zeros((m, d_model));
    for mut row in rows.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal) * scale);
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
                break;
            }
        }
    }
    Ok(EmbeddingMatrix { rows, kind: EmbeddingKind::GaussianUnitNorm, seed: Some(seed) })
}

/// I.i.d. Bernoulli(p_B) entries in {0, 1}.
pub fn gen_sparse_binary(m: usize, d_model: usize, p_b: f64, seed: u64) -> Result<EmbeddingMatrix> {
    if !(p_b > 0.0 && p_b < 1.0) {
        return invalid(format!("p_B must lie in (0, 1), got {p_b}"));
    }
    if d_model == 0 {
        return invalid("d_model must be at least 1");
    }
    let mut rng = stream(seed, purpose::EMBEDDING);
    let rows = Array2::from_shape_simple_fn((m, d_model), || {
        if rng.random::<f64>() < p_b { 1.0 } else { 0.0 }
    });
    Ok(EmbeddingMatrix { rows, kind: EmbeddingKind::SparseBinary { p_b }, seed: Some(seed) })
}

/// u = (1/μ) · x Xᵀ, the de-embedded image of `x_row` in one-hot space.
pub fn approx_inverse_row(x_row: ArrayView1<f64>, x: &EmbeddingMatrix, mu: f64) -> Result<Array1<f64>> {
    if !(mu > 0.0) {
        return invalid(format!("mu must be positive, got {mu}"));
    }
    if x_row.len() != x.d_model() {
        return invalid(format!("row has length {}, expected {}", x_row.len(), x.d_model()));
    }
    Ok(x.rows.dot(&x_row) / mu)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncoherenceReport {
    pub mu: f64,
    /// max_i |u_i(i) − 1|
    pub eps_d: f64,
    /// worst restricted leakage mass over |S| ≤ B
    pub rho: f64,
    /// worst restricted cross-leakage over the checked pairs
    pub gamma: f64,
    pub block_size: usize,
    pub pairs_checked: usize,
    /// true when gamma comes from a uniform sample of pairs rather than all of them
    pub gamma_sampled: bool,
}

/// Sum of the `b` largest values in `vals` (all of them if fewer).
fn top_sum(vals: &mut [f64], b: usize) -> f64 {
    if vals.len() > b {
        let pivot = vals.len() - b;
        vals.select_nth_unstable_by(pivot, |x, y| x.total_cmp(y));
        vals[pivot..].iter().sum()
    } else {
        vals.iter().sum()
    }
}

/// Best |Σ_{a∈S} δ_i(a)δ_j(a)| over |S| ≤ b.
fn pair_cross_leakage(di: ArrayView1<f64>, dj: ArrayView1<f64>, b: usize, pos: &mut Vec<f64>, neg: &mut Vec<f64>) -> f64 {
    pos.clear();
    neg.clear();
    for (&x, &y) in di.iter().zip(dj.iter()) {
        let p = x * y;
        if p > 0.0 {
            pos.push(p);
        } else if p < 0.0 {
            neg.push(-p);
        }
    }
    top_sum(pos, b).max(top_sum(neg, b))
}

/// Measure (ε_d, ρ, γ) at block size `block`.
///
/// ε_d and ρ are exact. γ is exact per pair; pairs are exhaustive when
/// m(m−1) ≤ `pair_budget`, otherwise `pair_budget` ordered pairs are drawn
/// uniformly (seeded by `seed`).
pub fn check_restricted_incoherence(
    x: &EmbeddingMatrix,
    mu: f64,
    block: usize,
    pair_budget: usize,
    seed: u64,
) -> Result<IncoherenceReport> {
    let m = x.m();
    if block < 1 || block + 1 > m {
        return invalid(format!("block size must satisfy 1 <= B <= m-1, got B = {block}, m = {m}"));
    }
    let delta = x.leakage(mu)?;

    let eps_d = (0..m).map(|i| delta[[i, i]].abs()).fold(0.0, f64::max);

    let mut scratch = Vec::with_capacity(m);
    let mut rho = 0.0f64;
    for (i, row) in delta.axis_iter(Axis(0)).enumerate() {
        scratch.clear();
        scratch.extend(row.iter().enumerate().filter(|&(s, _)| s != i).map(|(_, v)| v * v));
        rho = rho.max(top_sum(&mut scratch, block));
    }

    let total_pairs = m * (m - 1);
    let mut pos = Vec::with_capacity(m);
    let mut neg = Vec::with_capacity(m);
    let mut gamma = 0.0f64;
    let (pairs_checked, gamma_sampled) = if total_pairs <= pair_budget {
        // products are symmetric in (i, j): unordered pairs cover all ordered ones
        for i in 0..m {
            for j in i + 1..m {
                gamma = gamma.max(pair_cross_leakage(delta.row(i), delta.row(j), block, &mut pos, &mut neg));
            }
        }
        (total_pairs, false)
    } else {
        let mut rng = stream(seed, purpose::PAIRS);
        for _ in 0..pair_budget {
            let k = rng.random_range(0..total_pairs);
            let i = k / (m - 1);
            let r = k % (m - 1);
            let j = if r >= i { r + 1 } else { r };
            gamma = gamma.max(pair_cross_leakage(delta.row(i), delta.row(j), block, &mut pos, &mut neg));
        }
        (pair_budget, true)
    };

    Ok(IncoherenceReport { mu, eps_d, rho, gamma, block_size: block, pairs_checked, gamma_sampled })
}

/// Uniformly sample `count` distinct ordered pairs (i ≠ j) from `0..m`.
pub fn sample_pairs(m: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = m * m.saturating_sub(1);
    let mut rng = stream(seed, purpose::PAIRS);
    index::sample(&mut rng, total, count.min(total))
        .into_iter()
        .map(|k| {
            let i = k / (m - 1);
            let r = k % (m - 1);
            (i, if r >= i { r + 1 } else { r })
        })
        .collect()
}
