//! Relational graphs: derangement permutations, general loop-free digraphs,
//! and the coloring-and-batching decomposition of an edge set into bounded
//! matchings (one matching per attention head).

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{purpose, stream};

/// A directed graph on `m` vertices with ordered, loop-free, distinct edges.
///
/// Edges are kept sorted so that equality and serialization are canonical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct DirectedGraph {
    m: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
struct RawGraph {
    m: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawGraph> for DirectedGraph {
    type Error = crate::error::RgrError;

    fn try_from(raw: RawGraph) -> Result<Self> {
        DirectedGraph::new(raw.m, raw.edges)
    }
}

impl DirectedGraph {
    pub fn new(m: usize, mut edges: Vec<(usize, usize)>) -> Result<Self> {
        for &(i, j) in &edges {
            if i >= m || j >= m {
                return invalid(format!("edge ({i}, {j}) out of range for m = {m}"));
            }
            if i == j {
                return invalid(format!("self-loop at vertex {i}"));
            }
        }
        edges.sort_unstable();
        if edges.windows(2).any(|w| w[0] == w[1]) {
            return invalid("duplicate edge");
        }
        Ok(Self { m, edges })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Number of edges, m'.
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.edges.binary_search(&(i, j)).is_ok()
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(i, _) in &self.edges {
            deg[i] += 1;
        }
        deg
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(_, j) in &self.edges {
            deg[j] += 1;
        }
        deg
    }

    /// Dense row-major adjacency, `adj[i * m + j]`.
    pub fn adjacency(&self) -> Vec<bool> {
        let mut adj = vec![false; self.m * self.m];
        for &(i, j) in &self.edges {
            adj[i * self.m + j] = true;
        }
        adj
    }
}

/// Membership test shared by permutation graphs and general digraphs.
pub trait EdgeSet: Sync {
    fn vertex_count(&self) -> usize;
    fn has_edge(&self, i: usize, j: usize) -> bool;
}

impl EdgeSet for DirectedGraph {
    fn vertex_count(&self) -> usize {
        self.m
    }

    fn has_edge(&self, i: usize, j: usize) -> bool {
        self.contains(i, j)
    }
}

impl EdgeSet for PermutationGraph {
    fn vertex_count(&self) -> usize {
        self.m()
    }

    fn has_edge(&self, i: usize, j: usize) -> bool {
        self.is_edge(i, j)
    }
}

/// Maximum of all in- and out-degrees (Δ).
pub fn max_degree(g: &DirectedGraph) -> usize {
    let out = g.out_degrees().into_iter().max().unwrap_or(0);
    let inn = g.in_degrees().into_iter().max().unwrap_or(0);
    out.max(inn)
}

/// A permutation graph `i -> pi[i]` without fixed points.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPermutation", into = "RawPermutation")]
pub struct PermutationGraph {
    pi: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawPermutation {
    m: usize,
    pi: Vec<usize>,
}

impl TryFrom<RawPermutation> for PermutationGraph {
    type Error = crate::error::RgrError;

    fn try_from(raw: RawPermutation) -> Result<Self> {
        if raw.m != raw.pi.len() {
            return invalid(format!("m = {} but pi has {} entries", raw.m, raw.pi.len()));
        }
        PermutationGraph::new(raw.pi)
    }
}

impl From<PermutationGraph> for RawPermutation {
    fn from(p: PermutationGraph) -> Self {
        RawPermutation { m: p.pi.len(), pi: p.pi }
    }
}

impl PermutationGraph {
    pub fn new(pi: Vec<usize>) -> Result<Self> {
        let m = pi.len();
        let mut seen = vec![false; m];
        for (i, &t) in pi.iter().enumerate() {
            if t >= m || seen[t] {
                return invalid("pi is not a bijection on 0..m");
            }
            if t == i {
                return invalid(format!("pi has a fixed point at {i}"));
            }
            seen[t] = true;
        }
        Ok(Self { pi })
    }

    pub fn m(&self) -> usize {
        self.pi.len()
    }

    pub fn target(&self, i: usize) -> usize {
        self.pi[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.pi
    }

    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.pi.len()];
        for (i, &t) in self.pi.iter().enumerate() {
            inv[t] = i;
        }
        inv
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.pi[i] == j
    }

    pub fn to_graph(&self) -> DirectedGraph {
        let edges = self.pi.iter().enumerate().map(|(i, &t)| (i, t)).collect();
        DirectedGraph::new(self.pi.len(), edges).expect("derangement is a valid digraph")
    }
}

/// Uniform random derangement of `0..m`, by rejection from uniform shuffles.
pub fn random_derangement(m: usize, seed: u64) -> Result<PermutationGraph> {
    if m < 2 {
        return invalid(format!("derangement needs m >= 2, got {m}"));
    }
    let mut rng = stream(seed, purpose::PERMUTATION);
    let mut pi: Vec<usize> = (0..m).collect();
    loop {
        pi.shuffle(&mut rng);
        if pi.iter().enumerate().all(|(i, &t)| i != t) {
            return Ok(PermutationGraph { pi });
        }
    }
}

/// `m_prime` distinct ordered loop-free edges drawn uniformly without replacement.
pub fn random_directed_graph(m: usize, m_prime: usize, seed: u64) -> Result<DirectedGraph> {
    let n = m * m.saturating_sub(1);
    if m_prime > n {
        return invalid(format!("m' = {m_prime} exceeds m(m-1) = {n}"));
    }
    let mut rng = stream(seed, purpose::GRAPH);
    let edges = index::sample(&mut rng, n, m_prime)
        .into_iter()
        .map(|k| {
            // pairs are enumerated row by row, skipping the diagonal
            let i = k / (m - 1);
            let r = k % (m - 1);
            (i, if r >= i { r + 1 } else { r })
        })
        .collect();
    DirectedGraph::new(m, edges)
}

/// Random digraph with every in- and out-degree at most `max_degree`.
///
/// Edges are proposed uniformly and rejected when they would duplicate an
/// existing edge or exceed the degree cap. Fails if the sampler stalls.
pub fn random_bounded_degree_graph(
    m: usize,
    m_prime: usize,
    max_degree: usize,
    seed: u64,
) -> Result<DirectedGraph> {
    if m < 2 || m_prime > m * max_degree.min(m - 1) {
        return invalid(format!(
            "cannot place {m_prime} edges on {m} vertices with degree cap {max_degree}"
        ));
    }
    let mut rng = stream(seed, purpose::GRAPH);
    let mut out = vec![0usize; m];
    let mut inn = vec![0usize; m];
    let mut edges = HashSet::with_capacity(m_prime);
    let budget = 1000 * (m_prime + 1) + 10_000;
    let mut attempts = 0;
    while edges.len() < m_prime {
        attempts += 1;
        if attempts > budget {
            return invalid("degree-capped sampler stalled; lower m' or raise the cap");
        }
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..m);
        if i == j || out[i] >= max_degree || inn[j] >= max_degree || edges.contains(&(i, j)) {
            continue;
        }
        out[i] += 1;
        inn[j] += 1;
        edges.insert((i, j));
    }
    DirectedGraph::new(m, edges.into_iter().collect())
}

/// One head's share of the edge set: a partial bijection from sources to targets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
}

impl Matching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        let mut src = HashSet::new();
        let mut dst = HashSet::new();
        self.pairs.iter().all(|&(s, t)| src.insert(s) && dst.insert(t))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchingDecomposition {
    pub matchings: Vec<Matching>,
    pub block_cap: usize,
    /// Number of colors used by the edge coloring (equals Δ).
    pub colors: usize,
}

impl MatchingDecomposition {
    pub fn head_count(&self) -> usize {
        self.matchings.len()
    }

    /// ⌈m'/cap⌉ + Δ
    pub fn head_bound(g: &DirectedGraph, block_cap: usize) -> usize {
        g.edge_count().div_ceil(block_cap) + max_degree(g)
    }
}

/// Proper edge coloring of the bipartite incidence graph with exactly Δ
/// colors, via alternating-path recoloring. Returns one color per edge of
/// `g.edges()`.
fn bipartite_edge_coloring(g: &DirectedGraph, delta: usize) -> Vec<usize> {
    let m = g.m();
    // left[u * delta + c] = Some(v): edge u -> v carries color c
    let mut left: Vec<Option<usize>> = vec![None; m * delta];
    let mut right: Vec<Option<usize>> = vec![None; m * delta];
    let free = |slots: &[Option<usize>], x: usize| {
        (0..delta)
            .find(|&c| slots[x * delta + c].is_none())
            .expect("degree bound guarantees a free color")
    };

    for &(u, v) in g.edges() {
        let a = free(&left, u);
        if right[v * delta + a].is_some() {
            let b = free(&right, v);
            // Walk the a/b alternating path starting at v and swap its colors.
            // It cannot reach u, since u has no a-edge to enter through.
            let mut path = Vec::new();
            let mut at_right = true;
            let mut x = v;
            let mut c = a;
            loop {
                let next = if at_right {
                    right[x * delta + c]
                } else {
                    left[x * delta + c]
                };
                let Some(y) = next else { break };
                let (l, r) = if at_right { (y, x) } else { (x, y) };
                path.push((l, r, c));
                x = y;
                at_right = !at_right;
                c = if c == a { b } else { a };
            }
            for &(l, r, c) in &path {
                left[l * delta + c] = None;
                right[r * delta + c] = None;
            }
            for &(l, r, c) in &path {
                let swapped = if c == a { b } else { a };
                left[l * delta + swapped] = Some(r);
                right[r * delta + swapped] = Some(l);
            }
        }
        left[u * delta + a] = Some(v);
        right[v * delta + a] = Some(u);
    }

    g.edges()
        .iter()
        .map(|&(u, v)| {
            (0..delta)
                .find(|&c| left[u * delta + c] == Some(v))
                .expect("every edge is colored")
        })
        .collect()
}

/// Partition the edges into matchings of size at most `block_cap`:
/// Δ-edge-color the bipartite incidence graph, then split each color class.
pub fn decompose_into_matchings(g: &DirectedGraph, block_cap: usize) -> Result<MatchingDecomposition> {
    if block_cap == 0 {
        return invalid("block_cap must be at least 1");
    }
    let delta = max_degree(g);
    let mut classes: Vec<Vec<(usize, usize)>> = vec![Vec::new(); delta];
    if delta > 0 {
        let colors = bipartite_edge_coloring(g, delta);
        for (&e, &c) in g.edges().iter().zip(&colors) {
            classes[c].push(e);
        }
    }
    let matchings = classes
        .into_iter()
        .flat_map(|class| {
            class
                .chunks(block_cap)
                .map(|chunk| Matching { pairs: chunk.to_vec() })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(MatchingDecomposition { matchings, block_cap, colors: delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(n: usize) -> DirectedGraph {
        DirectedGraph::new(n + 1, (1..=n).map(|j| (0, j)).collect()).unwrap()
    }

    fn complete(m: usize) -> DirectedGraph {
        let edges = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        DirectedGraph::new(m, edges).unwrap()
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert!(DirectedGraph::new(3, vec![(0, 0)]).is_err());
        assert!(DirectedGraph::new(3, vec![(0, 3)]).is_err());
        assert!(DirectedGraph::new(3, vec![(0, 1), (0, 1)]).is_err());
    }

    #[test]
    fn derangement_of_two_is_swap() {
        for seed in 0..5 {
            assert_eq!(random_derangement(2, seed).unwrap().as_slice(), &[1, 0]);
        }
        assert!(random_derangement(1, 0).is_err());
        assert!(random_derangement(0, 0).is_err());
    }

    #[test]
    fn derangement_invariants() {
        let p = random_derangement(4, 7).unwrap();
        let mut sorted = p.as_slice().to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        assert!(p.as_slice().iter().enumerate().all(|(i, &t)| i != t));
        assert_eq!(random_derangement(50, 9).unwrap(), random_derangement(50, 9).unwrap());
    }

    #[test]
    fn permutation_rejects_fixed_points() {
        assert!(PermutationGraph::new(vec![0, 2, 1]).is_err());
        assert!(PermutationGraph::new(vec![1, 1, 0]).is_err());
        let p = PermutationGraph::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.inverse(), vec![1, 2, 0]);
    }

    #[test]
    fn random_digraph_examples() {
        let g = random_directed_graph(3, 6, 1).unwrap();
        assert_eq!(g, complete(3));
        assert_eq!(random_directed_graph(3, 0, 1).unwrap().edge_count(), 0);
        assert!(random_directed_graph(3, 7, 1).is_err());
        let a = random_directed_graph(5, 8, 1).unwrap();
        let b = random_directed_graph(5, 8, 2).unwrap();
        assert_eq!(a.edge_count(), 8);
        assert_eq!(b.edge_count(), 8);
        assert_ne!(a, b);
    }

    #[test]
    fn bounded_degree_graph_respects_cap() {
        let g = random_bounded_degree_graph(128, 256, 4, 3).unwrap();
        assert_eq!(g.edge_count(), 256);
        assert!(max_degree(&g) <= 4);
        assert!(random_bounded_degree_graph(4, 20, 4, 0).is_err());
    }

    #[test]
    fn max_degree_examples() {
        assert_eq!(max_degree(&random_derangement(10, 0).unwrap().to_graph()), 1);
        assert_eq!(max_degree(&complete(4)), 3);
        assert_eq!(max_degree(&star(5)), 5);
        assert_eq!(max_degree(&DirectedGraph::new(3, vec![]).unwrap()), 0);
    }

    #[test]
    fn permutation_is_a_single_matching() {
        let p = random_derangement(12, 4).unwrap();
        let d = decompose_into_matchings(&p.to_graph(), 12).unwrap();
        assert_eq!(d.head_count(), 1);
        assert_eq!(d.matchings[0].len(), 12);
    }

    #[test]
    fn star_needs_one_matching_per_edge() {
        let d = decompose_into_matchings(&star(5), 5).unwrap();
        assert_eq!(d.head_count(), 5);
        assert!(d.matchings.iter().all(|mk| mk.len() == 1));
    }

    #[test]
    fn zero_cap_is_rejected() {
        assert!(decompose_into_matchings(&star(2), 0).is_err());
    }

    #[test]
    fn random_digraph_decomposition_scan() {
        let g = random_directed_graph(8, 16, 11).unwrap();
        let d = decompose_into_matchings(&g, 4).unwrap();
        assert!(d.head_count() <= MatchingDecomposition::head_bound(&g, 4));
        // exhaustive pair scan inside every matching
        for mk in &d.matchings {
            assert!(mk.len() <= 4);
            for (a, &(s1, t1)) in mk.pairs.iter().enumerate() {
                for &(s2, t2) in &mk.pairs[a + 1..] {
                    assert_ne!(s1, s2);
                    assert_ne!(t1, t2);
                }
            }
        }
    }

    #[test]
    fn graph_json_shapes() {
        let g = DirectedGraph::new(3, vec![(1, 2), (0, 1)]).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        assert_eq!(s, r#"{"m":3,"edges":[[0,1],[1,2]]}"#);
        let back: DirectedGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        assert!(serde_json::from_str::<DirectedGraph>(r#"{"m":2,"edges":[[0,0]]}"#).is_err());

        let p = PermutationGraph::new(vec![1, 2, 0]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"m":3,"pi":[1,2,0]}"#);
        assert_eq!(serde_json::from_str::<PermutationGraph>(&s).unwrap(), p);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn decomposition_partitions_edges_into_capped_matchings(
            m in 4usize..40, density in 0.05f64..0.6, cap in 1usize..12, seed in any::<u64>()
        ) {
            let m_prime = ((m * (m - 1)) as f64 * density) as usize;
            let g = random_directed_graph(m, m_prime, seed).unwrap();
            let dec = decompose_into_matchings(&g, cap).unwrap();
            let mut covered: Vec<(usize, usize)> = dec.matchings.iter().flat_map(|mt| mt.pairs.clone()).collect();
            covered.sort_unstable();
            let mut edges = g.edges().to_vec();
            edges.sort_unstable();
            prop_assert_eq!(covered, edges);
            for mt in &dec.matchings {
                prop_assert!(mt.is_valid());
                prop_assert!(mt.len() <= cap && !mt.is_empty());
            }
            prop_assert_eq!(dec.colors, max_degree(&g));
            prop_assert!(dec.head_count() <= MatchingDecomposition::head_bound(&g, cap));
        }

        #[test]
        fn bounded_degree_sampler_respects_cap(m in 8usize..60, cap in 1usize..5, seed in any::<u64>()) {
            let m_prime = m * cap / 2;
            let g = random_bounded_degree_graph(m, m_prime, cap, seed).unwrap();
            prop_assert_eq!(g.edge_count(), m_prime);
            prop_assert!(max_degree(&g) <= cap);
            prop_assert!(g.edges().iter().all(|&(i, j)| i != j));
        }

        #[test]
        fn derangement_has_no_fixed_points(m in 2usize..200, seed in any::<u64>()) {
            let pi = random_derangement(m, seed).unwrap();
            let mut seen = vec![false; m];
            for i in 0..m {
                prop_assert_ne!(pi.target(i), i);
                prop_assert!(!seen[pi.target(i)]);
                seen[pi.target(i)] = true;
            }
        }
    }
}
