//! Certification of constructed parameters, context sampling, pooled
//! micro-F1 and Monte-Carlo success rates.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::{full_score_max, Context};
use crate::construct::{
    construct_compressive_permutation, construct_compressive_permutation_blocked, construct_general_embedding,
    construct_general_graph, construct_onehot_permutation, AttentionParams,
};
use crate::embed::{gen_gaussian_unit_norm, gen_one_hot, gen_sparse_binary, EmbeddingMatrix};
use crate::error::{invalid, Result};
use crate::graph::{
    random_bounded_degree_graph, random_derangement, random_directed_graph, DirectedGraph, EdgeSet,
    PermutationGraph,
};
use crate::rng::{child_seed, purpose, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// min over true edges of S^max − τ (+∞ when there are no edges)
    pub min_true_margin: f64,
    /// max over non-edges of S^max − τ (−∞ when there are none)
    pub max_false_margin: f64,
    pub pass: bool,
    pub true_violations: usize,
    pub false_violations: usize,
}

/// Exact scan of all m(m−1) ordered pairs under max aggregation.
pub fn full_separation_check<G: EdgeSet>(params: &AttentionParams, x: &EmbeddingMatrix, g: &G) -> Result<SeparationReport> {
    let m = x.m();
    if g.vertex_count() != m {
        return invalid(format!("graph has {} vertices but the embedding has {m} rows", g.vertex_count()));
    }
    let scores = full_score_max(params, x)?;
    let mut min_true = f64::INFINITY;
    let mut max_false = f64::NEG_INFINITY;
    let (mut tv, mut fv) = (0, 0);
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let margin = scores[[i, j]] - params.tau;
            if g.has_edge(i, j) {
                min_true = min_true.min(margin);
                if margin <= 0.0 {
                    tv += 1;
                }
            } else {
                max_false = max_false.max(margin);
                if margin >= 0.0 {
                    fv += 1;
                }
            }
        }
    }
    Ok(SeparationReport {
        min_true_margin: min_true,
        max_false_margin: max_false,
        pass: tv == 0 && fv == 0,
        true_violations: tv,
        false_violations: fv,
    })
}

/// Three-step sampler: a uniform ℓ-subset S; a Binomial(ℓ, ρ) subset U of
/// S; then for each i ∈ U whose target is missing, overwrite a uniformly
/// chosen other member of S with π(i). Later insertions may evict earlier
/// ones, and members of U that were evicted are still processed.
pub fn sample_context_with<R: Rng + ?Sized>(pi: &PermutationGraph, ell: usize, rho: f64, rng: &mut R) -> Result<Context> {
    let m = pi.m();
    if ell < 2 || ell > m {
        return invalid(format!("context length must satisfy 2 <= ell <= m = {m}, got {ell}"));
    }
    if !(0.0..=1.0).contains(&rho) {
        return invalid(format!("rho must lie in [0, 1], got {rho}"));
    }
    let mut s = index::sample(rng, m, ell).into_vec();
    let b = Binomial::new(ell as u64, rho).expect("validated binomial parameters").sample(rng) as usize;
    let chosen: Vec<usize> = index::sample(rng, ell, b).into_iter().map(|p| s[p]).collect();
    let mut member = vec![false; m];
    for &v in &s {
        member[v] = true;
    }
    for i in chosen {
        let t = pi.target(i);
        if member[t] {
            continue;
        }
        let victim_pos = loop {
            let p = rng.random_range(0..ell);
            if s[p] != i {
                break p;
            }
        };
        member[s[victim_pos]] = false;
        s[victim_pos] = t;
        member[t] = true;
    }
    Ok(Context::from_unchecked(s))
}

pub fn sample_context(pi: &PermutationGraph, ell: usize, rho: f64, seed: u64) -> Result<Context> {
    sample_context_with(pi, ell, rho, &mut stream(seed, purpose::CONTEXT))
}

/// `count` contexts, context `c` drawn from its own child seed.
pub fn sample_contexts(pi: &PermutationGraph, ell: usize, rho: f64, count: usize, seed: u64) -> Result<Vec<Context>> {
    (0..count)
        .map(|c| sample_context(pi, ell, rho, child_seed(seed, purpose::CONTEXT, c as u64)))
        .collect()
}

/// A uniform ℓ-subset in random order.
pub fn sample_uniform_context(m: usize, ell: usize, seed: u64) -> Result<Context> {
    if ell < 1 || ell > m {
        return invalid(format!("context length must satisfy 1 <= ell <= m = {m}, got {ell}"));
    }
    let mut rng = stream(seed, purpose::CONTEXT);
    let mut s = index::sample(&mut rng, m, ell).into_vec();
    s.shuffle(&mut rng);
    Ok(Context::from_unchecked(s))
}

/// Pooled confusion counts over ordered distinct-position pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(self, o: Confusion) -> Confusion {
        Confusion { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    /// 2TP / (2TP + FP + FN); 1 when there is nothing to find and nothing predicted.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// Query and key projections of every vertex, computed once so that a pair
/// score costs D_K multiply-adds.
pub struct Scorer {
    q: Array2<f64>,
    k: Array2<f64>,
    heads: usize,
    d_k: usize,
    pub tau: f64,
}

impl Scorer {
    pub fn new(params: &AttentionParams, x: &EmbeddingMatrix) -> Result<Self> {
        if params.d_model() != x.d_model() {
            return invalid(format!(
                "params expect d_model = {} but embedding has {}",
                params.d_model(),
                x.d_model()
            ));
        }
        if params.heads == 0 {
            return invalid("params have no heads");
        }
        Ok(Scorer {
            q: x.rows.dot(&params.w_q),
            k: x.rows.dot(&params.w_k),
            heads: params.heads,
            d_k: params.d_k,
            tau: params.tau,
        })
    }

    pub fn m(&self) -> usize {
        self.q.nrows()
    }

    /// S^max(i, j)
    pub fn score(&self, i: usize, j: usize) -> f64 {
        let q = self.q.row(i);
        let k = self.k.row(j);
        let (q, k) = (q.as_slice().expect("standard layout"), k.as_slice().expect("standard layout"));
        let mut best = f64::NEG_INFINITY;
        for (qh, kh) in q.chunks_exact(self.d_k).zip(k.chunks_exact(self.d_k)).take(self.heads) {
            let s: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
            best = best.max(s);
        }
        best
    }

    pub fn confusion<G: EdgeSet>(&self, g: &G, c: &Context) -> Confusion {
        let mut out = Confusion::default();
        for &i in c.indices() {
            for &j in c.indices() {
                if i == j {
                    continue;
                }
                let pred = self.score(i, j) > self.tau;
                match (pred, g.has_edge(i, j)) {
                    (true, true) => out.tp += 1,
                    (true, false) => out.fp += 1,
                    (false, true) => out.fn_ += 1,
                    (false, false) => out.tn += 1,
                }
            }
        }
        out
    }

    pub fn pooled<G: EdgeSet>(&self, g: &G, contexts: &[Context]) -> Confusion {
        contexts
            .par_iter()
            .map(|c| self.confusion(g, c))
            .reduce(Confusion::default, Confusion::add)
    }
}

fn check_contexts(contexts: &[Context], m: usize) -> Result<()> {
    if contexts.is_empty() {
        return invalid("micro-F1 needs at least one context");
    }
    if let Some(bad) = contexts.iter().flat_map(|c| c.indices()).find(|&&v| v >= m) {
        return invalid(format!("context index {bad} out of range for m = {m}"));
    }
    Ok(())
}

pub fn micro_f1_graph<G: EdgeSet>(params: &AttentionParams, x: &EmbeddingMatrix, g: &G, contexts: &[Context]) -> Result<f64> {
    check_contexts(contexts, x.m())?;
    Ok(Scorer::new(params, x)?.pooled(g, contexts).f1())
}

pub fn micro_f1(params: &AttentionParams, x: &EmbeddingMatrix, pi: &PermutationGraph, contexts: &[Context]) -> Result<f64> {
    micro_f1_graph(params, x, pi, contexts)
}

/// A random instance family for Monte-Carlo certification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "construction", deny_unknown_fields)]
pub enum ConstructionSpec {
    #[serde(rename = "I")]
    OneHotPermutation { m: usize, p: f64, d_k: usize },
    #[serde(rename = "II")]
    CompressivePermutation {
        m: usize,
        d_model: usize,
        d_k: usize,
        #[serde(default)]
        block: Option<usize>,
    },
    #[serde(rename = "III")]
    GeneralEmbedding {
        m: usize,
        d_model: usize,
        /// density of the sparse binary embedding; absent means one-hot
        #[serde(default)]
        p_b: Option<f64>,
        block: usize,
        p: f64,
        d_k: usize,
    },
    #[serde(rename = "IV")]
    GeneralGraph {
        m: usize,
        m_prime: usize,
        #[serde(default)]
        max_degree: Option<usize>,
        d_model: usize,
        d_k: usize,
    },
}

/// One drawn instance: graph, embedding and constructed parameters.
#[derive(Clone, Debug)]
pub struct Instance {
    pub graph: DirectedGraph,
    pub permutation: Option<PermutationGraph>,
    pub embedding: EmbeddingMatrix,
    pub params: AttentionParams,
}

impl Instance {
    pub fn separation(&self) -> Result<SeparationReport> {
        full_separation_check(&self.params, &self.embedding, &self.graph)
    }
}

pub fn build_instance(spec: &ConstructionSpec, seed: u64) -> Result<Instance> {
    match *spec {
        ConstructionSpec::OneHotPermutation { m, p, d_k } => {
            let pi = random_derangement(m, seed)?;
            let embedding = gen_one_hot(m)?;
            let params = construct_onehot_permutation(&pi, p, d_k, seed)?;
            Ok(Instance { graph: pi.to_graph(), permutation: Some(pi), embedding, params })
        }
        ConstructionSpec::CompressivePermutation { m, d_model, d_k, block } => {
            let pi = random_derangement(m, seed)?;
            let embedding = gen_gaussian_unit_norm(m, d_model, seed)?;
            let params = match block {
                Some(b) => construct_compressive_permutation_blocked(&pi, &embedding, d_k, b, seed)?,
                None => construct_compressive_permutation(&pi, &embedding, d_k, seed)?,
            };
            Ok(Instance { graph: pi.to_graph(), permutation: Some(pi), embedding, params })
        }
        ConstructionSpec::GeneralEmbedding { m, d_model, p_b, block, p, d_k } => {
            let pi = random_derangement(m, seed)?;
            let embedding = match p_b {
                Some(pb) => gen_sparse_binary(m, d_model, pb, seed)?,
                None => gen_one_hot(m)?,
            };
            let mu = embedding.default_mu();
            let params = construct_general_embedding(&pi, &embedding, mu, block, p, d_k, seed)?;
            Ok(Instance { graph: pi.to_graph(), permutation: Some(pi), embedding, params })
        }
        ConstructionSpec::GeneralGraph { m, m_prime, max_degree, d_model, d_k } => {
            let graph = match max_degree {
                Some(cap) => random_bounded_degree_graph(m, m_prime, cap, seed)?,
                None => random_directed_graph(m, m_prime, seed)?,
            };
            let embedding = gen_gaussian_unit_norm(m, d_model, seed)?;
            let params = construct_general_graph(&graph, &embedding, d_k, seed)?;
            Ok(Instance { graph, permutation: None, embedding, params })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub heads: usize,
    pub total_key_dim: usize,
    pub edges: usize,
    pub report: SeparationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub failure_rate: f64,
    pub min_true_margin: f64,
    pub median_min_true_margin: f64,
    pub max_false_margin: f64,
    pub median_max_false_margin: f64,
    pub trials: Vec<TrialOutcome>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Independent draws of (graph, embedding, signatures); trial `t` uses
/// `child_seed(seed, TRIAL, t)`.
pub fn monte_carlo_success(spec: &ConstructionSpec, trials: usize, seed: u64) -> Result<MonteCarloSummary> {
    if trials == 0 {
        return invalid("trials must be at least 1");
    }
    let outcomes: Vec<TrialOutcome> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let s = child_seed(seed, purpose::TRIAL, t as u64);
            let inst = build_instance(spec, s)?;
            Ok(TrialOutcome {
                seed: s,
                heads: inst.params.heads,
                total_key_dim: inst.params.total_key_dim(),
                edges: inst.graph.edge_count(),
                report: inst.separation()?,
            })
        })
        .collect::<Result<_>>()?;
    let failures = outcomes.iter().filter(|o| !o.report.pass).count();
    let mins: Vec<f64> = outcomes.iter().map(|o| o.report.min_true_margin).collect();
    let maxs: Vec<f64> = outcomes.iter().map(|o| o.report.max_false_margin).collect();
    Ok(MonteCarloSummary {
        failure_rate: failures as f64 / trials as f64,
        min_true_margin: mins.iter().copied().fold(f64::INFINITY, f64::min),
        median_min_true_margin: median(mins),
        max_false_margin: maxs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median_max_false_margin: median(maxs),
        trials: outcomes,
    })
}
