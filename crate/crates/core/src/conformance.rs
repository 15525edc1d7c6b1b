//! Brute-force oracles, planted instances and the conformance runner.
//!
//! Oracles here never call the production routine they check: transport is
//! solved by vertex enumeration, subgraph refinement by exhaustive search,
//! spectra by cyclic Jacobi rotations, gradients by central differences.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentCorpus, KnowledgeItem, Modality, Query};
use crate::crm::GatingSample;
use crate::error::{Error, Result};
use crate::seeded_rng;
use crate::spectral::{Edge, KnowledgeGraph, Vertex};
use crate::transport::EmpiricalDistribution;

pub const OT_CELL_LIMIT: usize = 20;
pub const OT_PERMUTATION_LIMIT: usize = 8;
pub const SUBSET_LIMIT: usize = 12;
pub const JACOBI_LIMIT: usize = 64;

/// One oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub module: String,
    pub case: String,
    pub oracle: f64,
    pub implementation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleResult {
    pub fn numeric(module: &str, case: impl Into<String>, oracle: f64, implementation: f64, tolerance: f64) -> Self {
        let pass = (oracle - implementation).abs() <= tolerance;
        Self {
            module: module.into(),
            case: case.into(),
            oracle,
            implementation,
            tolerance,
            pass,
        }
    }

    /// Discrete outputs: 1.0 when equal, 0.0 otherwise, zero tolerance.
    pub fn discrete(module: &str, case: impl Into<String>, equal: bool) -> Self {
        Self {
            module: module.into(),
            case: case.into(),
            oracle: 1.0,
            implementation: if equal { 1.0 } else { 0.0 },
            tolerance: 0.0,
            pass: equal,
        }
    }

    /// `implementation <= bound + tolerance`.
    pub fn at_most(module: &str, case: impl Into<String>, bound: f64, implementation: f64, tolerance: f64) -> Self {
        Self {
            module: module.into(),
            case: case.into(),
            oracle: bound,
            implementation,
            tolerance,
            pass: implementation <= bound + tolerance,
        }
    }
}

// ---------------------------------------------------------------------------
// Optimal transport

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact W2 by enumerating every basic feasible solution of the
/// transportation polytope (spanning trees of the bipartite support graph),
/// or every permutation when both sides are uniform with equal size.
pub fn ot_bruteforce(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<f64> {
    let (m, n) = (p.len(), q.len());
    let cost: Vec<f64> = (0..m * n)
        .map(|c| sq_dist(&p.support()[c / n], &q.support()[c % n]))
        .collect();
    let uniform = |w: &[f64]| w.iter().all(|x| (x - w[0]).abs() < 1e-15);
    if m == n && m <= OT_PERMUTATION_LIMIT && uniform(p.weights()) && uniform(q.weights()) {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permutations(&mut perm, 0, &mut |perm| {
            let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            best = best.min(c / n as f64);
        });
        return Ok(best.sqrt());
    }
    if m * n > OT_CELL_LIMIT {
        return Err(Error::SupportTooLarge {
            size: m * n,
            limit: OT_CELL_LIMIT,
        });
    }
    let basis = m + n - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(basis);
    combinations(m * n, basis, 0, &mut chosen, &mut |cells| {
        if let Some(flow) = tree_solution(cells, p.weights(), q.weights(), n) {
            let c: f64 = cells.iter().zip(&flow).map(|(&cell, f)| cost[cell] * f).sum();
            best = best.min(c);
        }
    });
    if !best.is_finite() {
        return Err(Error::Numerical {
            detail: "no feasible vertex found".into(),
            residual: f64::NAN,
        });
    }
    Ok(best.max(0.0).sqrt())
}

fn permutations(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permutations(v, k + 1, visit);
        v.swap(k, i);
    }
}

fn combinations(n: usize, k: usize, start: usize, acc: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if acc.len() == k {
        visit(acc);
        return;
    }
    for i in start..n {
        if n - i < k - acc.len() {
            break;
        }
        acc.push(i);
        combinations(n, k, i + 1, acc, visit);
        acc.pop();
    }
}

/// Solves the marginal equations on a candidate basis by leaf peeling.
/// Returns `None` when the cells contain a cycle or the flow is negative.
fn tree_solution(cells: &[usize], a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let m = a.len();
    let mut row_left = a.to_vec();
    let mut col_left = b.to_vec();
    let mut flow = vec![f64::NAN; cells.len()];
    let mut open: Vec<bool> = vec![true; cells.len()];
    let mut remaining = cells.len();
    while remaining > 0 {
        let mut progressed = false;
        for line in 0..m + n {
            let members: Vec<usize> = (0..cells.len())
                .filter(|&c| open[c] && if line < m { cells[c] / n == line } else { cells[c] % n == line - m })
                .collect();
            if members.len() != 1 {
                continue;
            }
            let c = members[0];
            let (i, j) = (cells[c] / n, cells[c] % n);
            let value = if line < m { row_left[i] } else { col_left[j] };
            flow[c] = value;
            row_left[i] -= value;
            col_left[j] -= value;
            open[c] = false;
            remaining -= 1;
            progressed = true;
        }
        if !progressed {
            return None;
        }
    }
    let residual = row_left.iter().chain(&col_left).map(|x| x.abs()).fold(0.0, f64::max);
    if residual > 1e-12 || flow.iter().any(|&f| f < -1e-12) {
        return None;
    }
    Some(flow)
}

// ---------------------------------------------------------------------------
// Subgraph refinement

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetOptimum {
    pub vertices: Vec<usize>,
    pub objective: f64,
}

/// `sum over edges inside S of w (r_u - r_v)^2 + rho * (weight leaving S)`.
pub fn subset_objective(graph: &KnowledgeGraph, r: &[f64], set: &[bool], rho: f64) -> f64 {
    let mut smooth = 0.0;
    let mut cut = 0.0;
    for e in graph.edges() {
        match (set[e.u], set[e.v]) {
            (true, true) => smooth += e.weight * (r[e.u] - r[e.v]).powi(2),
            (true, false) | (false, true) => cut += e.weight,
            _ => {}
        }
    }
    smooth + rho * cut
}

/// Global optimum over every non-empty subset with relevance mass `>= eta`;
/// ties prefer fewer vertices, then the lexicographically smaller list.
pub fn subset_bruteforce(graph: &KnowledgeGraph, r: &[f64], eta: f64, rho: f64) -> Result<SubsetOptimum> {
    let n = graph.len();
    if n > SUBSET_LIMIT {
        return Err(Error::SupportTooLarge {
            size: n,
            limit: SUBSET_LIMIT,
        });
    }
    if r.len() != n {
        return Err(Error::contract("relevance length does not match the graph"));
    }
    let total: f64 = r.iter().sum();
    if eta > total {
        return Err(Error::Infeasible(format!("eta = {eta} exceeds total relevance {total}")));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 1u32..(1u32 << n) {
        let set: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
        let mass: f64 = (0..n).filter(|&i| set[i]).map(|i| r[i]).sum();
        if mass < eta {
            continue;
        }
        let obj = subset_objective(graph, r, &set, rho);
        let members: Vec<usize> = (0..n).filter(|&i| set[i]).collect();
        let better = match &best {
            None => true,
            Some((b, bm)) => {
                obj < *b - 1e-12
                    || ((obj - *b).abs() <= 1e-12
                        && (members.len(), &members) < (bm.len(), bm))
            }
        };
        if better {
            best = Some((obj, members));
        }
    }
    let (objective, vertices) = best.expect("the full vertex set is feasible");
    Ok(SubsetOptimum { vertices, objective })
}

// ---------------------------------------------------------------------------
// Spectra

/// `D - A` assembled directly from the edge list.
pub fn dense_laplacian(graph: &KnowledgeGraph) -> DMatrix<f64> {
    let n = graph.len();
    let mut l = DMatrix::zeros(n, n);
    for e in graph.edges() {
        l[(e.u, e.v)] -= e.weight;
        l[(e.v, e.u)] -= e.weight;
        l[(e.u, e.u)] += e.weight;
        l[(e.v, e.v)] += e.weight;
    }
    l
}

/// Full ascending spectrum of a symmetric matrix by cyclic Jacobi sweeps.
pub fn dense_eigs(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::contract("dense_eigs needs a square matrix"));
    }
    if n > JACOBI_LIMIT {
        return Err(Error::SupportTooLarge {
            size: n,
            limit: JACOBI_LIMIT,
        });
    }
    let mut a = m.clone();
    let scale = a.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale * n as f64 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut values: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

// ---------------------------------------------------------------------------
// Gradients

#[derive(Debug, Clone, PartialEq)]
pub struct FdGradient {
    pub values: Vec<f64>,
    /// Coordinates where either perturbed evaluation was not finite.
    pub non_finite: Vec<usize>,
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_difference_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> FdGradient {
    let mut p = params.to_vec();
    let mut values = Vec::with_capacity(p.len());
    let mut non_finite = Vec::new();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = f(&p);
        p[i] = orig - h;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            non_finite.push(i);
            values.push(f64::NAN);
        } else {
            values.push((plus - minus) / (2.0 * h));
        }
    }
    FdGradient { values, non_finite }
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().map(|x| x.abs()).fold(floor, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

// ---------------------------------------------------------------------------
// Planted instances

fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z
        })
        .collect()
}

/// Erdős–Rényi graph with weights in `[0.5, 2)`. With `connected`, a random
/// spanning path is added first.
pub fn random_graph(n: usize, p: f64, connected: bool, seed: u64) -> KnowledgeGraph {
    let mut rng = seeded_rng(seed);
    let mut pairs = BTreeSet::new();
    if connected {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for w in order.windows(2) {
            pairs.insert((w[0].min(w[1]), w[0].max(w[1])));
        }
    }
    for a in 0..n {
        for b in a + 1..n {
            if rng.random_bool(p) {
                pairs.insert((a, b));
            }
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(u, v)| Edge {
            u,
            v,
            weight: rng.random_range(0.5..2.0),
        })
        .collect();
    KnowledgeGraph::new(plain_vertices(n), edges, Vec::new()).expect("valid random graph")
}

fn plain_vertices(n: usize) -> Vec<Vertex> {
    (0..n)
        .map(|i| Vertex {
            id: format!("v{i:03}"),
            label: format!("v{i}"),
            features: vec![0.0],
        })
        .collect()
}

/// Cliques on `0..a` and `a..a+b` with unit weights, joined by one edge of
/// weight `bridge`.
pub fn two_cliques(a: usize, b: usize, bridge: f64) -> KnowledgeGraph {
    let mut edges = Vec::new();
    for (lo, hi) in [(0, a), (a, a + b)] {
        for u in lo..hi {
            for v in u + 1..hi {
                edges.push(Edge { u, v, weight: 1.0 });
            }
        }
    }
    if bridge > 0.0 && a > 0 && b > 0 {
        edges.push(Edge {
            u: a - 1,
            v: a,
            weight: bridge,
        });
    }
    KnowledgeGraph::new(plain_vertices(a + b), edges, Vec::new()).expect("valid clique graph")
}

/// Three well-separated Gaussian clusters. Each query's positives are the
/// items of its own cluster; items cycle through the three modalities.
/// Returns the corpus with the cluster of every query and item.
pub fn three_cluster_corpus(
    queries_per_cluster: usize,
    items_per_cluster: usize,
    feature_dim: usize,
    seed: u64,
) -> (AlignmentCorpus, Vec<usize>, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|_| gaussian(&mut rng, feature_dim).into_iter().map(|x| 4.0 * x).collect())
        .collect();
    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, c: &[f64]| -> Vec<f64> {
        c.iter()
            .map(|x| {
                let z: f64 = StandardNormal.sample(rng);
                x + 0.3 * z
            })
            .collect()
    };
    let modalities = [Modality::Visual, Modality::Textual, Modality::GraphTriplet];
    let mut corpus = AlignmentCorpus::default();
    let mut q_cluster = Vec::new();
    let mut i_cluster = Vec::new();
    for c in 0..3 {
        for _ in 0..items_per_cluster {
            let idx = corpus.items.len();
            corpus.items.push(KnowledgeItem {
                id: format!("i{idx:04}"),
                modality: modalities[idx % 3],
                features: jitter(&mut rng, &centers[c]),
            });
            i_cluster.push(c);
        }
    }
    for c in 0..3 {
        for _ in 0..queries_per_cluster {
            let qi = corpus.queries.len();
            corpus.queries.push(Query {
                id: format!("q{qi:04}"),
                visual_features: jitter(&mut rng, &centers[c]),
                text_features: jitter(&mut rng, &centers[c]),
            });
            q_cluster.push(c);
            for (ii, &ic) in i_cluster.iter().enumerate() {
                if ic == c {
                    corpus.positives.push((qi, ii));
                }
            }
        }
    }
    (corpus, q_cluster, i_cluster)
}

/// Labelled relevance instance that a small head can fit exactly: queries
/// and items come from four separated clusters and an item is relevant iff
/// it shares the query's cluster.
#[derive(Debug, Clone)]
pub struct SeparableCorpus {
    pub queries: Vec<Query>,
    pub items: Vec<KnowledgeItem>,
    /// Per query: positive item indices, negative item indices.
    pub labels: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn crm_separable_corpus(seed: u64) -> SeparableCorpus {
    let mut rng = seeded_rng(seed);
    let dim = 4;
    let centers: Vec<Vec<f64>> = (0..4)
        .map(|c| (0..dim).map(|d| if d == c { 2.0 } else { 0.0 }).collect())
        .collect();
    let mut noisy = |c: &[f64]| -> Vec<f64> { c.iter().map(|x| x + rng.random_range(-0.2..0.2)).collect() };
    let mut items = Vec::new();
    for i in 0..16 {
        items.push(KnowledgeItem {
            id: format!("d{i:02}"),
            modality: Modality::Textual,
            features: noisy(&centers[i % 4]),
        });
    }
    let mut queries = Vec::new();
    let mut labels = Vec::new();
    for qi in 0..8 {
        let c = qi % 4;
        queries.push(Query {
            id: format!("q{qi}"),
            visual_features: noisy(&centers[c]),
            text_features: noisy(&centers[c]),
        });
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..items.len()).partition(|&i| i % 4 == c);
        labels.push((pos, neg));
    }
    SeparableCorpus { queries, items, labels }
}

/// `n` gating samples with `sigma ~ U[0, 1]` and retrieval needed exactly
/// when `sigma <= cutoff`.
pub fn calibrated_gating(n: usize, cutoff: f64, seed: u64) -> Vec<GatingSample> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let s: f64 = rng.random_range(0.0..1.0);
            (s, s <= cutoff)
        })
        .collect()
}

/// Best θ on the 0.01 grid by exhaustive scan, with the accuracy reached.
pub fn best_threshold_bruteforce(samples: &[GatingSample]) -> (Vec<f64>, f64) {
    let acc = |t: f64| {
        samples
            .iter()
            .filter(|(s, need)| (!(*s > t)) == *need)
            .count() as f64
            / samples.len().max(1) as f64
    };
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let best = grid.iter().map(|&t| acc(t)).fold(0.0, f64::max);
    (grid.into_iter().filter(|&t| acc(t) == best).collect(), best)
}

mod runner;
pub use runner::run;
