//! Explicit QK weight constructions for relational graph recognition.
//!
//! All four constructions share one template: draw a random signature `w_j`
//! for every target, build one-hot-space templates in which source `i` of a
//! head's block queries with `w_{π(i)}` and target `j` keys with `w_j`, then
//! map the templates into model space through the approximate inverse
//! `(1/μ) Xᵀ`. They differ in the embedding, the signature family, the block
//! partition and the threshold.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingKind, EmbeddingMatrix};
use crate::error::{invalid, Result};
use crate::graph::{decompose_into_matchings, DirectedGraph, PermutationGraph};
use crate::rng::{purpose, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstructionKind {
    /// Construction I: one-hot inputs, one head, Bernoulli signatures.
    OneHotPermutation,
    /// Construction II: Gaussian unit-norm inputs, one head per block, Rademacher signatures.
    CompressivePermutation,
    /// Construction III: any restricted self-incoherent embedding, Bernoulli signatures.
    GeneralEmbedding,
    /// Construction IV: general digraphs packed into matchings.
    GeneralGraph,
    /// Parameters produced by gradient training.
    Learned,
}

impl ConstructionKind {
    pub fn label(&self) -> &'static str {
        match self {
            ConstructionKind::OneHotPermutation => "I",
            ConstructionKind::CompressivePermutation => "II",
            ConstructionKind::GeneralEmbedding => "III",
            ConstructionKind::GeneralGraph => "IV",
            ConstructionKind::Learned => "learned",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum SignatureKind {
    Bernoulli { p: f64 },
    Rademacher,
}

/// Sources and targets served by one head, as `(source, target)` pairs of its
/// bijection `V_k -> T_k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadBlock {
    pub pairs: Vec<(usize, usize)>,
}

impl HeadBlock {
    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|&(_, t)| t)
    }

    pub fn target_of(&self, source: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(s, _)| s == source).map(|&(_, t)| t)
    }

    pub fn has_target(&self, target: usize) -> bool {
        self.pairs.iter().any(|&(_, t)| t == target)
    }
}

/// Everything needed to re-derive a constructed head's score decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionTrace {
    /// m × d_k signature matrix; row j is `w_j`.
    pub signatures: Array2<f64>,
    pub blocks: Vec<HeadBlock>,
    pub signature_kind: SignatureKind,
    pub mu: f64,
}

/// `h` heads of (W_Q, W_K), stored concatenated as d_model × (h·d_k)
/// matrices; head k owns columns `k·d_k .. (k+1)·d_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub heads: usize,
    pub d_k: usize,
    pub tau: f64,
    pub construction: ConstructionKind,
    pub seed: Option<u64>,
    pub trace: Option<ConstructionTrace>,
}

impl AttentionParams {
    pub fn zeros(d_model: usize, heads: usize, d_k: usize, tau: f64) -> Self {
        AttentionParams {
            w_q: Array2::zeros((d_model, heads * d_k)),
            w_k: Array2::zeros((d_model, heads * d_k)),
            heads,
            d_k,
            tau,
            construction: ConstructionKind::Learned,
            seed: None,
            trace: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.nrows()
    }

    /// Total key dimension D_K = h · d_k.
    pub fn total_key_dim(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn head_q(&self, k: usize) -> ArrayView2<'_, f64> {
        self.w_q.slice(s![.., k * self.d_k..(k + 1) * self.d_k])
    }

    pub fn head_k(&self, k: usize) -> ArrayView2<'_, f64> {
        self.w_k.slice(s![.., k * self.d_k..(k + 1) * self.d_k])
    }
}

fn draw_signatures(m: usize, d_k: usize, kind: SignatureKind, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, purpose::SIGNATURES);
    match kind {
        SignatureKind::Bernoulli { p } => {
            Array2::from_shape_simple_fn((m, d_k), || if rng.random::<f64>() < p { 1.0 } else { 0.0 })
        }
        SignatureKind::Rademacher => {
            Array2::from_shape_simple_fn((m, d_k), || if rng.random::<bool>() { 1.0 } else { -1.0 })
        }
    }
}

/// W_Q^{(k)} = (1/μ) Σ_{(s,t)∈block} x_s ⊗ w_t  and  W_K^{(k)} = (1/μ) Σ_t x_t ⊗ w_t.
fn realize(x: &EmbeddingMatrix, mu: f64, blocks: &[HeadBlock], signatures: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let d_model = x.d_model();
    let d_k = signatures.ncols();
    let mut w_q = Array2::zeros((d_model, blocks.len() * d_k));
    let mut w_k = Array2::zeros((d_model, blocks.len() * d_k));
    let inv_mu = mu.recip();
    for (k, block) in blocks.iter().enumerate() {
        let cols = s![.., k * d_k..(k + 1) * d_k];
        let mut q = w_q.slice_mut(cols);
        for &(src, tgt) in &block.pairs {
            let xs = x.row(src);
            let wt = signatures.row(tgt);
            for (a, &xa) in xs.iter().enumerate() {
                if xa != 0.0 {
                    q.row_mut(a).scaled_add(xa * inv_mu, &wt);
                }
            }
        }
        let mut kk = w_k.slice_mut(cols);
        for tgt in block.targets() {
            let xt = x.row(tgt);
            let wt = signatures.row(tgt);
            for (a, &xa) in xt.iter().enumerate() {
                if xa != 0.0 {
                    kk.row_mut(a).scaled_add(xa * inv_mu, &wt);
                }
            }
        }
    }
    (w_q, w_k)
}

/// Contiguous blocks of at most `block` sources, each paired with its targets.
fn permutation_blocks(pi: &PermutationGraph, block: usize) -> Vec<HeadBlock> {
    (0..pi.m())
        .collect::<Vec<_>>()
        .chunks(block)
        .map(|chunk| HeadBlock { pairs: chunk.iter().map(|&i| (i, pi.target(i))).collect() })
        .collect()
}

/// Construction I. Keys are Bernoulli(p) signatures; the query of `i` is the
/// key of `π(i)`; τ = (p + p²)/2 · d_k.
pub fn construct_onehot_permutation(pi: &PermutationGraph, p: f64, d_k: usize, seed: u64) -> Result<AttentionParams> {
    if !(p > 0.0 && p < 0.5) {
        return invalid(format!("signature density p must lie in (0, 1/2), got {p}"));
    }
    if d_k == 0 {
        return invalid("d_k must be at least 1");
    }
    let m = pi.m();
    let kind = SignatureKind::Bernoulli { p };
    let signatures = draw_signatures(m, d_k, kind, seed);
    let mut w_q = Array2::zeros((m, d_k));
    for i in 0..m {
        w_q.row_mut(i).assign(&signatures.row(pi.target(i)));
    }
    Ok(AttentionParams {
        w_q,
        w_k: signatures.clone(),
        heads: 1,
        d_k,
        tau: (p + p * p) / 2.0 * d_k as f64,
        construction: ConstructionKind::OneHotPermutation,
        seed: Some(seed),
        trace: Some(ConstructionTrace {
            signatures,
            blocks: permutation_blocks(pi, m),
            signature_kind: kind,
            mu: 1.0,
        }),
    })
}

/// Construction II: ⌈m/d_model⌉ heads, contiguous source blocks of size
/// d_model, shared Rademacher signatures, τ = d_k/2.
pub fn construct_compressive_permutation(
    pi: &PermutationGraph,
    x: &EmbeddingMatrix,
    d_k: usize,
    seed: u64,
) -> Result<AttentionParams> {
    construct_compressive_permutation_blocked(pi, x, d_k, x.d_model(), seed)
}

/// Construction II with an explicit block size (the number of sources served
/// per head). `block = d_model` is the standard choice.
pub fn construct_compressive_permutation_blocked(
    pi: &PermutationGraph,
    x: &EmbeddingMatrix,
    d_k: usize,
    block: usize,
    seed: u64,
) -> Result<AttentionParams> {
    if x.kind != EmbeddingKind::GaussianUnitNorm {
        return invalid(format!("compressive construction needs a gaussian-unit-norm embedding, got {}", x.kind.name()));
    }
    if x.m() != pi.m() {
        return invalid(format!("embedding has {} rows but the graph has {} vertices", x.m(), pi.m()));
    }
    if x.d_model() > pi.m() {
        return invalid(format!("d_model = {} exceeds m = {}", x.d_model(), pi.m()));
    }
    if d_k == 0 || block == 0 {
        return invalid("d_k and block size must be at least 1");
    }
    let kind = SignatureKind::Rademacher;
    let signatures = draw_signatures(pi.m(), d_k, kind, seed);
    let blocks = permutation_blocks(pi, block);
    let (w_q, w_k) = realize(x, 1.0, &blocks, &signatures);
    Ok(AttentionParams {
        w_q,
        w_k,
        heads: blocks.len(),
        d_k,
        tau: d_k as f64 / 2.0,
        construction: ConstructionKind::CompressivePermutation,
        seed: Some(seed),
        trace: Some(ConstructionTrace { signatures, blocks, signature_kind: kind, mu: 1.0 }),
    })
}

/// Construction III: ⌈m/B⌉ heads over blocks of size B, Bernoulli(p)
/// signatures with p ≤ 1/20, realized through X_inv = (1/μ) Xᵀ.
pub fn construct_general_embedding(
    pi: &PermutationGraph,
    x: &EmbeddingMatrix,
    mu: f64,
    block: usize,
    p: f64,
    d_k: usize,
    seed: u64,
) -> Result<AttentionParams> {
    if !(p > 0.0 && p <= 0.05) {
        return invalid(format!("signature density p must lie in (0, 1/20], got {p}"));
    }
    if !(mu > 0.0) {
        return invalid(format!("mu must be positive, got {mu}"));
    }
    if block == 0 || block > pi.m() {
        return invalid(format!("block size must satisfy 1 <= B <= m, got {block}"));
    }
    if x.m() != pi.m() {
        return invalid(format!("embedding has {} rows but the graph has {} vertices", x.m(), pi.m()));
    }
    if d_k == 0 {
        return invalid("d_k must be at least 1");
    }
    let kind = SignatureKind::Bernoulli { p };
    let signatures = draw_signatures(pi.m(), d_k, kind, seed);
    let blocks = permutation_blocks(pi, block);
    let (w_q, w_k) = realize(x, mu, &blocks, &signatures);
    Ok(AttentionParams {
        w_q,
        w_k,
        heads: blocks.len(),
        d_k,
        tau: (p + p * p) / 2.0 * d_k as f64,
        construction: ConstructionKind::GeneralEmbedding,
        seed: Some(seed),
        trace: Some(ConstructionTrace { signatures, blocks, signature_kind: kind, mu }),
    })
}

/// Construction IV: pack the edges into matchings of at most d_model pairs
/// (one head each) and run the compressive template per head; τ = d_k/2.
pub fn construct_general_graph(g: &DirectedGraph, x: &EmbeddingMatrix, d_k: usize, seed: u64) -> Result<AttentionParams> {
    if x.kind != EmbeddingKind::GaussianUnitNorm {
        return invalid(format!("general-graph construction needs a gaussian-unit-norm embedding, got {}", x.kind.name()));
    }
    if x.m() != g.m() {
        return invalid(format!("embedding has {} rows but the graph has {} vertices", x.m(), g.m()));
    }
    if d_k == 0 {
        return invalid("d_k must be at least 1");
    }
    let decomposition = decompose_into_matchings(g, x.d_model())?;
    let blocks: Vec<HeadBlock> = decomposition
        .matchings
        .into_iter()
        .map(|mk| HeadBlock { pairs: mk.pairs })
        .collect();
    let kind = SignatureKind::Rademacher;
    let signatures = draw_signatures(g.m(), d_k, kind, seed);
    let (w_q, w_k) = realize(x, 1.0, &blocks, &signatures);
    Ok(AttentionParams {
        w_q,
        w_k,
        heads: blocks.len(),
        d_k,
        tau: d_k as f64 / 2.0,
        construction: ConstructionKind::GeneralGraph,
        seed: Some(seed),
        trace: Some(ConstructionTrace { signatures, blocks, signature_kind: kind, mu: 1.0 }),
    })
}

/// d_k = ⌈C · ln m⌉.
pub fn width_for(m: usize, c: f64) -> usize {
    (c * (m as f64).ln()).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{gen_gaussian_unit_norm, gen_one_hot};
    use crate::graph::{random_derangement, random_directed_graph};

    #[test]
    fn onehot_threshold_substitution() {
        let pi = random_derangement(8, 0).unwrap();
        let params = construct_onehot_permutation(&pi, 0.25, 64, 0).unwrap();
        assert_eq!(params.tau, 10.0);
        assert_eq!(params.total_key_dim(), 64);
        assert!(construct_onehot_permutation(&pi, 0.5, 8, 0).is_err());
        assert!(construct_onehot_permutation(&pi, 0.0, 8, 0).is_err());
    }

    #[test]
    fn onehot_query_rows_copy_target_keys() {
        let pi = random_derangement(4, 3).unwrap();
        let params = construct_onehot_permutation(&pi, 0.25, 8, 5).unwrap();
        for i in 0..4 {
            assert_eq!(params.w_q.row(i), params.w_k.row(pi.target(i)));
        }
        assert!(params.w_k.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn general_embedding_on_one_hot_reduces_to_construction_one() {
        let pi = random_derangement(16, 2).unwrap();
        let x = gen_one_hot(16).unwrap();
        let a = construct_onehot_permutation(&pi, 0.05, 12, 7).unwrap();
        let b = construct_general_embedding(&pi, &x, 1.0, 16, 0.05, 12, 7).unwrap();
        assert_eq!(a.w_q, b.w_q);
        assert_eq!(a.w_k, b.w_k);
        assert_eq!(a.tau, b.tau);
        assert!(construct_general_embedding(&pi, &x, 1.0, 16, 0.06, 12, 7).is_err());
    }

    #[test]
    fn compressive_head_count_and_budget() {
        let pi = random_derangement(100, 1).unwrap();
        let x = gen_gaussian_unit_norm(100, 32, 1).unwrap();
        let params = construct_compressive_permutation(&pi, &x, 10, 1).unwrap();
        assert_eq!(params.heads, 4);
        assert_eq!(params.total_key_dim(), 40);
        assert_eq!(params.tau, 5.0);
        let trace = params.trace.as_ref().unwrap();
        assert_eq!(trace.blocks.iter().map(|b| b.pairs.len()).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        // every true edge is owned by exactly one block
        for i in 0..100 {
            let owners = trace.blocks.iter().filter(|b| b.target_of(i) == Some(pi.target(i))).count();
            assert_eq!(owners, 1);
        }
    }

    #[test]
    fn compressive_preconditions() {
        let pi = random_derangement(16, 1).unwrap();
        let big = gen_gaussian_unit_norm(16, 32, 1).unwrap();
        assert!(construct_compressive_permutation(&pi, &big, 8, 0).is_err());
        let onehot = gen_one_hot(16).unwrap();
        assert!(construct_compressive_permutation(&pi, &onehot, 8, 0).is_err());
    }

    #[test]
    fn determinism() {
        let pi = random_derangement(64, 1).unwrap();
        let x = gen_gaussian_unit_norm(64, 16, 1).unwrap();
        let a = construct_compressive_permutation(&pi, &x, 12, 9).unwrap();
        let b = construct_compressive_permutation(&pi, &x, 12, 9).unwrap();
        assert_eq!(a, b);
        let g = random_directed_graph(64, 100, 2).unwrap();
        assert_eq!(construct_general_graph(&g, &x, 8, 1).unwrap(), construct_general_graph(&g, &x, 8, 1).unwrap());
    }

    #[test]
    fn general_graph_on_permutation_matches_block_structure() {
        let pi = random_derangement(64, 4).unwrap();
        let x = gen_gaussian_unit_norm(64, 16, 4).unwrap();
        let params = construct_general_graph(&pi.to_graph(), &x, 8, 0).unwrap();
        assert_eq!(params.heads, 4);
        assert!(params.trace.unwrap().blocks.iter().all(|b| b.pairs.len() == 16));
    }

    #[test]
    fn width_uses_natural_log() {
        assert_eq!(width_for(256, 8.0), 45);
        assert_eq!(width_for(64, 8.0), 34);
        assert_eq!(width_for(512, 6.0), 38);
    }
}
