// Sweep-cut rounding of the relevance-constrained Rayleigh-quotient problem,
// cut/conductance accounting and the Cheeger check.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::eigen::{smallest_eigenpairs, EigenPair, LaplacianOperator};
use super::{KnowledgeGraph, RelevanceVector, Triplet};
use crate::alignment::{EmbeddingTable, Encoder, Modality};
use crate::error::{Error, Result};
use crate::lorentz::{exp_origin, log_origin, LorentzPoint};

/// A selected vertex set with its indicator and objective breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    /// Selected vertex indices, ascending.
    pub vertices: Vec<usize>,
    pub indicator: Vec<bool>,
    pub eta: f64,
    pub relevance_mass: f64,
    /// Internal smoothness term `sum w_ij (r_i - r_j)^2` over edges inside S.
    pub smoothness: f64,
    pub cut: f64,
    pub objective: f64,
    /// Set when no sweep set was feasible and `S = V` was returned.
    pub fallback: bool,
}

impl Subgraph {
    pub fn contains(&self, v: usize) -> bool {
        self.indicator.get(v).copied().unwrap_or(false)
    }

    /// Edges of the parent graph with both endpoints in S.
    pub fn induced_edges<'g>(&self, graph: &'g KnowledgeGraph) -> Vec<&'g super::Edge> {
        graph
            .edges()
            .iter()
            .filter(|e| self.contains(e.u) && self.contains(e.v))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Number of eigenvectors swept.
    pub k: usize,
    /// Weight of the cut term.
    pub rho: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self { k: 10, rho: 1.0 }
    }
}

/// Total weight of edges with exactly one endpoint in `set`.
pub fn cut_size(graph: &KnowledgeGraph, set: &[bool]) -> f64 {
    graph
        .edges()
        .iter()
        .filter(|e| set[e.u] != set[e.v])
        .fold(0.0, |acc, e| acc + e.weight)
}

/// `cut(S) / min(vol S, vol V\S)`; requires a proper non-empty subset.
pub fn conductance(graph: &KnowledgeGraph, set: &[bool]) -> Result<f64> {
    if set.len() != graph.len() {
        return Err(Error::contract("conductance: indicator length mismatch"));
    }
    let inside = set.iter().filter(|b| **b).count();
    if inside == 0 || inside == graph.len() {
        return Err(Error::contract("conductance needs a proper non-empty subset"));
    }
    let vol_in: f64 = (0..graph.len()).filter(|&v| set[v]).map(|v| graph.degree(v)).sum();
    let vol_total: f64 = graph.degrees().iter().sum();
    let denom = vol_in.min(vol_total - vol_in);
    let cut = cut_size(graph, set);
    if denom <= 0.0 {
        return Ok(if cut > 0.0 { 1.0 } else { 0.0 });
    }
    Ok((cut / denom).clamp(0.0, 1.0))
}

/// Objective `smoothness + rho * cut` of an arbitrary set.
pub(crate) fn objective_of(graph: &KnowledgeGraph, r: &[f64], set: &[bool], rho: f64) -> (f64, f64) {
    let mut smooth = 0.0;
    let mut cut = 0.0;
    for e in graph.edges() {
        match (set[e.u], set[e.v]) {
            (true, true) => smooth += e.weight * (r[e.u] - r[e.v]).powi(2),
            (true, false) | (false, true) => cut += e.weight,
            _ => {}
        }
    }
    (smooth, rho * cut + smooth)
}

/// Solves for the `k` smallest Laplacian eigenvectors, then sweeps.
pub fn refine_subgraph(
    graph: &KnowledgeGraph,
    relevance: &RelevanceVector,
    eta: f64,
    options: RefineOptions,
) -> Result<Subgraph> {
    check_inputs(graph, relevance, eta)?;
    let k = options.k.min(graph.len()).max(1);
    let pairs = smallest_eigenpairs(&LaplacianOperator::new(graph), k)?;
    refine_subgraph_with(graph, relevance, eta, options.rho, &pairs)
}

fn check_inputs(graph: &KnowledgeGraph, relevance: &RelevanceVector, eta: f64) -> Result<()> {
    if graph.is_empty() {
        return Err(Error::contract("refine_subgraph: empty graph"));
    }
    if relevance.len() != graph.len() {
        return Err(Error::contract("relevance vector length does not match the graph"));
    }
    if !(eta >= 0.0) {
        return Err(Error::contract(format!("eta must be non-negative, got {eta}")));
    }
    let total = relevance.total();
    if eta > total {
        return Err(Error::Infeasible(format!(
            "eta = {eta} exceeds total relevance {total}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct Best {
    objective: f64,
    size: usize,
    origin: (usize, bool, usize),
}

/// Sweep rounding with precomputed eigenpairs (the Laplacian spectrum does
/// not depend on the query, so callers can cache it).
///
/// For every eigenvector, vertices are ordered by entry (ties by vertex id)
/// and every prefix and suffix is a candidate. Among candidates with
/// `sum_{i in S} r_i >= eta`, the smallest `smoothness + rho * cut` wins;
/// ties prefer the smaller set, then the lexicographically smaller id list.
pub fn refine_subgraph_with(
    graph: &KnowledgeGraph,
    relevance: &RelevanceVector,
    eta: f64,
    rho: f64,
    pairs: &[EigenPair],
) -> Result<Subgraph> {
    check_inputs(graph, relevance, eta)?;
    let n = graph.len();
    let r = relevance.values();
    let ids: Vec<&str> = graph.vertices().iter().map(|v| v.id.as_str()).collect();

    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.vector.len() != n {
            return Err(Error::contract("eigenvector length does not match the graph"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            pair.vector[a]
                .total_cmp(&pair.vector[b])
                .then_with(|| ids[a].cmp(ids[b]))
        });
        orders.push(order);
    }

    let mut best: Option<Best> = None;
    let mut best_set: Vec<usize> = Vec::new();
    let mut in_set = vec![false; n];
    for (oi, order) in orders.iter().enumerate() {
        for reversed in [false, true] {
            in_set.iter_mut().for_each(|b| *b = false);
            let (mut smooth, mut cut, mut mass) = (0.0, 0.0, 0.0);
            let seq: Box<dyn Iterator<Item = &usize>> = if reversed {
                Box::new(order.iter().rev())
            } else {
                Box::new(order.iter())
            };
            for (pos, &v) in seq.enumerate() {
                for &(u, w) in graph.neighbors(v) {
                    if in_set[u] {
                        smooth += w * (r[v] - r[u]).powi(2);
                        cut -= w;
                    } else {
                        cut += w;
                    }
                }
                in_set[v] = true;
                mass += r[v];
                if mass < eta {
                    continue;
                }
                let objective = smooth + rho * cut.max(0.0);
                let size = pos + 1;
                let candidate = Best {
                    objective,
                    size,
                    origin: (oi, reversed, size),
                };
                let better = match best {
                    None => true,
                    Some(b) => {
                        let tol = 1e-12 * b.objective.abs().max(1.0);
                        if objective < b.objective - tol {
                            true
                        } else if objective > b.objective + tol {
                            false
                        } else if size != b.size {
                            size < b.size
                        } else {
                            let mut ids_new: Vec<&str> = sweep_members(&orders, candidate.origin)
                                .iter()
                                .map(|&i| ids[i])
                                .collect();
                            ids_new.sort_unstable();
                            let mut ids_old: Vec<&str> = best_set.iter().map(|&i| ids[i]).collect();
                            ids_old.sort_unstable();
                            ids_new.cmp(&ids_old) == Ordering::Less
                        }
                    }
                };
                if better {
                    best = Some(candidate);
                    best_set = sweep_members(&orders, candidate.origin);
                }
            }
        }
    }

    let (set, fallback) = match best {
        Some(_) => (best_set, false),
        None => {
            log::warn!("no feasible sweep set; falling back to the whole graph");
            ((0..n).collect(), true)
        }
    };
    Ok(build_subgraph(graph, r, eta, rho, set, fallback))
}

fn sweep_members(orders: &[Vec<usize>], origin: (usize, bool, usize)) -> Vec<usize> {
    let (oi, reversed, size) = origin;
    let order = &orders[oi];
    if reversed {
        order[order.len() - size..].to_vec()
    } else {
        order[..size].to_vec()
    }
}

pub(crate) fn build_subgraph(
    graph: &KnowledgeGraph,
    r: &[f64],
    eta: f64,
    rho: f64,
    mut set: Vec<usize>,
    fallback: bool,
) -> Subgraph {
    set.sort_unstable();
    let mut indicator = vec![false; graph.len()];
    for &v in &set {
        indicator[v] = true;
    }
    let (smoothness, objective) = objective_of(graph, r, &indicator, rho);
    let relevance_mass = set.iter().map(|&v| r[v]).sum();
    Subgraph {
        cut: cut_size(graph, &indicator),
        vertices: set,
        indicator,
        eta,
        relevance_mass,
        smoothness,
        objective,
        fallback,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheegerReport {
    /// Second-smallest eigenvalue of the normalized Laplacian.
    pub lambda2_normalized: f64,
    /// Second-smallest eigenvalue of `L = D - A`.
    pub lambda2: f64,
    /// Minimum conductance over sweep cuts of the normalized Fiedler vector.
    pub sweep_conductance: f64,
    /// `sqrt(2 * lambda2_normalized)`.
    pub bound: f64,
    pub satisfied: bool,
    /// True for disconnected or trivial graphs.
    pub degenerate: bool,
}

/// Checks `min sweep conductance <= sqrt(2 lambda_2)` on the normalized
/// spectrum.
pub fn cheeger_check(graph: &KnowledgeGraph) -> Result<CheegerReport> {
    let n = graph.len();
    if n < 2 {
        return Err(Error::contract("cheeger_check needs at least two vertices"));
    }
    let components = graph.components();
    if components.len() > 1 {
        let mut set = vec![false; n];
        for &v in &components[0] {
            set[v] = true;
        }
        let phi = conductance(graph, &set).unwrap_or(0.0);
        return Ok(CheegerReport {
            lambda2_normalized: 0.0,
            lambda2: 0.0,
            sweep_conductance: phi,
            bound: 0.0,
            satisfied: phi <= 0.0,
            degenerate: true,
        });
    }
    let unnormalized = smallest_eigenpairs(&LaplacianOperator::new(graph), 2)?;
    let normalized = smallest_eigenpairs(&LaplacianOperator::normalized(graph), 2)?;
    let lambda2_normalized = normalized[1].value.max(0.0);
    let fiedler: Vec<f64> = normalized[1]
        .vector
        .iter()
        .enumerate()
        .map(|(v, x)| x / graph.degree(v).sqrt())
        .collect();
    let sweep_conductance = min_sweep_conductance(graph, &fiedler);
    let bound = (2.0 * lambda2_normalized).sqrt();
    Ok(CheegerReport {
        lambda2_normalized,
        lambda2: unnormalized[1].value.max(0.0),
        sweep_conductance,
        bound,
        satisfied: sweep_conductance <= bound + 1e-9,
        degenerate: false,
    })
}

/// Minimum conductance over the `n - 1` proper prefix sets of `x`'s order.
pub(crate) fn min_sweep_conductance(graph: &KnowledgeGraph, x: &[f64]) -> f64 {
    let n = graph.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let vol_total: f64 = graph.degrees().iter().sum();
    let mut in_set = vec![false; n];
    let (mut cut, mut vol) = (0.0, 0.0);
    let mut best = f64::INFINITY;
    for &v in order.iter().take(n - 1) {
        for &(u, w) in graph.neighbors(v) {
            if in_set[u] {
                cut -= w;
            } else {
                cut += w;
            }
        }
        in_set[v] = true;
        vol += graph.degree(v);
        let denom = vol.min(vol_total - vol);
        if denom > 0.0 {
            best = best.min(cut.max(0.0) / denom);
        }
    }
    best
}

/// Triplets whose head and tail both lie in the subgraph.
pub fn extract_triplets<'g>(subgraph: &Subgraph, graph: &'g KnowledgeGraph) -> Vec<&'g Triplet> {
    graph
        .triplets()
        .iter()
        .filter(|t| subgraph.contains(t.head) && subgraph.contains(t.tail))
        .collect()
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stable pseudo-features in `[-1, 1]` derived from a relation label.
pub fn relation_features(relation: &str, dim: usize) -> Vec<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(fnv1a(relation));
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Embeds head, relation and tail through the graph encoder and returns the
/// point whose origin tangent is the mean of the three tangents.
pub fn embed_triplet(
    table: &EmbeddingTable,
    graph: &KnowledgeGraph,
    triplet: &Triplet,
) -> Result<LorentzPoint> {
    let encoder = Encoder::Item(Modality::GraphTriplet);
    let in_dim = table.map(encoder)?.in_dim;
    let head = table.embed(&graph.vertices()[triplet.head].features, encoder)?;
    let rel = table.embed(&relation_features(&triplet.relation, in_dim), encoder)?;
    let tail = table.embed(&graph.vertices()[triplet.tail].features, encoder)?;
    let tangents = [log_origin(&head), log_origin(&rel), log_origin(&tail)];
    let mean: Vec<f64> = (0..table.dim)
        .map(|i| tangents.iter().map(|t| t[i]).sum::<f64>() / 3.0)
        .collect();
    Ok(exp_origin(&mean))
}
