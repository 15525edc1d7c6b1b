//! Knowledge graphs and spectral subgraph refinement.

mod eigen;
mod refine;

pub use eigen::{
    smallest_eigenpairs, smallest_eigenpairs_with, EigenMethod, EigenPair, LaplacianOperator,
    SymmetricOperator, DENSE_LIMIT,
};
pub use refine::{
    cheeger_check, conductance, cut_size, embed_triplet, extract_triplets, refine_subgraph,
    refine_subgraph_with, relation_features, CheegerReport, RefineOptions, Subgraph,
};

use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::alignment::{Modality, Query};
use crate::error::{Error, Result};
use crate::scorer::{Candidate, Scorer};
use crate::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: String,
    pub label: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// `(head, relation, tail)`; head and tail are vertex indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

/// Weighted undirected entity graph with a triplet overlay.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    vertices: Vec<Vertex>,
    edges: Vec<Edge>,
    triplets: Vec<Triplet>,
    adjacency: Vec<Vec<(usize, f64)>>,
    degrees: Vec<f64>,
    index: HashMap<String, usize>,
}

impl KnowledgeGraph {
    /// Validates endpoints, weights, self-loops and duplicate pairs.
    pub fn new(vertices: Vec<Vertex>, edges: Vec<Edge>, triplets: Vec<Triplet>) -> Result<Self> {
        let n = vertices.len();
        let mut index = HashMap::with_capacity(n);
        for (i, v) in vertices.iter().enumerate() {
            if index.insert(v.id.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vertex id {}", v.id)));
            }
        }
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); n];
        let mut degrees = vec![0.0; n];
        for e in &edges {
            if e.u >= n || e.v >= n {
                return Err(Error::contract(format!("edge ({}, {}) has a missing endpoint", e.u, e.v)));
            }
            if e.u == e.v {
                return Err(Error::contract(format!("self-loop on vertex {}", e.u)));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::contract(format!("edge ({}, {}) has weight {}", e.u, e.v, e.weight)));
            }
            if !seen.insert((e.u.min(e.v), e.u.max(e.v))) {
                return Err(Error::contract(format!("duplicate edge ({}, {})", e.u, e.v)));
            }
            adjacency[e.u].push((e.v, e.weight));
            adjacency[e.v].push((e.u, e.weight));
            degrees[e.u] += e.weight;
            degrees[e.v] += e.weight;
        }
        for t in &triplets {
            if t.head >= n || t.tail >= n {
                return Err(Error::contract(format!("triplet {:?} references a missing vertex", t)));
            }
        }
        Ok(Self {
            vertices,
            edges,
            triplets,
            adjacency,
            degrees,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.adjacency[v]
    }

    /// Weighted degree `D_ii`.
    pub fn degree(&self, v: usize) -> f64 {
        self.degrees[v]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn vertex_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Connected components over positive-weight edges, each sorted.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut label = vec![usize::MAX; n];
        let mut out = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut stack = vec![start];
            let mut members = Vec::new();
            label[start] = id;
            while let Some(v) = stack.pop() {
                members.push(v);
                for &(u, w) in &self.adjacency[v] {
                    if w > 0.0 && label[u] == usize::MAX {
                        label[u] = id;
                        stack.push(u);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.len() > 0 && self.components().len() == 1
    }

    /// `x^T L x = sum_{(i,j) in E} w_ij (x_i - x_j)^2`, evaluated edge-wise.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|e| e.weight * (x[e.u] - x[e.v]).powi(2))
            .sum()
    }

    /// The same graph with vertices reordered: new vertex `i` is old vertex
    /// `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        if perm.len() != n {
            return Err(Error::contract("permutation length mismatch"));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let vertices = perm.iter().map(|&o| self.vertices[o].clone()).collect();
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                u: inverse[e.u],
                v: inverse[e.v],
                weight: e.weight,
            })
            .collect();
        let triplets = self
            .triplets
            .iter()
            .map(|t| Triplet {
                head: inverse[t.head],
                relation: t.relation.clone(),
                tail: inverse[t.tail],
            })
            .collect();
        Self::new(vertices, edges, triplets)
    }
}

/// Dense `L = D - A`.
pub fn laplacian(graph: &KnowledgeGraph) -> DMatrix<f64> {
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

/// Per-vertex relevance scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector(Vec<f64>);

impl RelevanceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("relevance {bad} outside [0, 1]")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `r_i = sigmoid(scorer(query, v_i))`.
pub fn relevance_vector<S: Scorer>(
    query: &Query,
    graph: &KnowledgeGraph,
    scorer: &S,
) -> Result<RelevanceVector> {
    let values = graph
        .vertices()
        .iter()
        .map(|v| {
            let candidate = Candidate {
                id: &v.id,
                modality: Modality::GraphTriplet,
                features: &v.features,
            };
            let raw = scorer.score(query, &candidate).map_err(|e| match e {
                e @ Error::Scorer { .. } => e,
                other => Error::Scorer {
                    id: v.id.clone(),
                    detail: other.to_string(),
                },
            })?;
            if !raw.is_finite() {
                return Err(Error::Scorer {
                    id: v.id.clone(),
                    detail: format!("non-finite score {raw}"),
                });
            }
            Ok(sigmoid(raw))
        })
        .collect::<Result<Vec<_>>>()?;
    RelevanceVector::new(values)
}

#[cfg(test)]
pub(crate) mod test_graphs {
    use super::*;

    pub fn vertex(i: usize) -> Vertex {
        Vertex {
            id: format!("v{i:03}"),
            label: format!("entity {i}"),
            features: vec![i as f64, 1.0],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> KnowledgeGraph {
        let vertices = (0..n).map(vertex).collect();
        let edges = edges.iter().map(|&(u, v, weight)| Edge { u, v, weight }).collect();
        KnowledgeGraph::new(vertices, edges, Vec::new()).unwrap()
    }

    pub fn path(n: usize) -> KnowledgeGraph {
        let e: Vec<_> = (0..n - 1).map(|i| (i, i + 1, 1.0)).collect();
        from_edges(n, &e)
    }

    pub fn complete(n: usize) -> KnowledgeGraph {
        let mut e = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                e.push((i, j, 1.0));
            }
        }
        from_edges(n, &e)
    }

    /// Two disjoint cliques on `0..a` and `a..a+b`.
    pub fn two_cliques(a: usize, b: usize) -> KnowledgeGraph {
        let mut e = Vec::new();
        for block in [(0, a), (a, a + b)] {
            for i in block.0..block.1 {
                for j in i + 1..block.1 {
                    e.push((i, j, 1.0));
                }
            }
        }
        from_edges(a + b, &e)
    }
}

#[cfg(test)]
mod tests {
    use super::test_graphs::*;
    use super::*;
    use crate::scorer::TableScorer;

    #[test]
    fn edgeless_laplacian_is_zero() {
        let g = from_edges(3, &[]);
        assert_eq!(laplacian(&g), DMatrix::zeros(3, 3));
    }

    #[test]
    fn path_laplacian() {
        let l = laplacian(&path(3));
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(l, expected);
    }

    #[test]
    fn graph_validation() {
        let vs = vec![vertex(0), vertex(1)];
        let bad = |edges: Vec<Edge>| KnowledgeGraph::new(vs.clone(), edges, vec![]).is_err();
        assert!(bad(vec![Edge { u: 0, v: 2, weight: 1.0 }]));
        assert!(bad(vec![Edge { u: 1, v: 1, weight: 1.0 }]));
        assert!(bad(vec![Edge { u: 0, v: 1, weight: -1.0 }]));
        assert!(bad(vec![Edge { u: 0, v: 1, weight: 1.0 }, Edge { u: 1, v: 0, weight: 2.0 }]));
        let t = Triplet {
            head: 0,
            relation: "r".into(),
            tail: 5,
        };
        assert!(KnowledgeGraph::new(vs.clone(), vec![], vec![t]).is_err());
        assert!(KnowledgeGraph::new(vec![vertex(0), vertex(0)], vec![], vec![]).is_err());
    }

    #[test]
    fn relevance_from_constant_scores() {
        let g = path(4);
        let q = Query {
            id: "q".into(),
            visual_features: vec![],
            text_features: vec![],
        };
        let r = relevance_vector(&q, &g, &TableScorer::constant(0.0)).unwrap();
        assert!(r.values().iter().all(|v| *v == 0.5));
        let r = relevance_vector(&q, &g, &TableScorer::constant(50.0)).unwrap();
        assert!(r.values().iter().all(|v| *v > 1.0 - 1e-9));
        let err = relevance_vector(&q, &g, &TableScorer::default()).unwrap_err();
        assert!(matches!(err, Error::Scorer { ref id, .. } if id == "v000"));
    }

    #[test]
    fn components_of_two_cliques() {
        let g = two_cliques(3, 4);
        assert_eq!(g.components(), vec![vec![0, 1, 2], vec![3, 4, 5, 6]]);
        assert!(!g.is_connected());
        assert!(complete(4).is_connected());
    }
}
