use hyperrag_core::conformance::{dense_eigs, random_graph, subset_objective};
use hyperrag_core::spectral::{
    self, laplacian, Edge, KnowledgeGraph, LaplacianOperator, RefineOptions, RelevanceVector,
};
use proptest::prelude::*;

fn graph() -> impl Strategy<Value = KnowledgeGraph> {
    (2usize..25, 0.05f64..0.6, any::<bool>(), any::<u64>())
        .prop_map(|(n, p, connected, seed)| random_graph(n, p, connected, seed))
}

fn with_relevance(max_n: usize) -> impl Strategy<Value = (KnowledgeGraph, Vec<f64>)> {
    (3usize..max_n, 0.1f64..0.6, any::<u64>()).prop_flat_map(|(n, p, seed)| {
        (Just(random_graph(n, p, true, seed)), prop::collection::vec(0.0f64..1.0, n))
    })
}

/// Disjoint union of the given graphs.
fn compose(parts: &[KnowledgeGraph]) -> KnowledgeGraph {
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    for g in parts {
        let off = vertices.len();
        for v in g.vertices() {
            let mut v = v.clone();
            v.id = format!("c{off}-{}", v.id);
            vertices.push(v);
        }
        edges.extend(g.edges().iter().map(|e| Edge { u: e.u + off, v: e.v + off, weight: e.weight }));
    }
    KnowledgeGraph::new(vertices, edges, Vec::new()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn laplacian_rows_sum_to_zero_and_psd(g in graph(), x in prop::collection::vec(-1.0f64..1.0, 25)) {
        let l = laplacian(&g);
        for i in 0..g.len() {
            prop_assert!(l.row(i).sum().abs() <= 1e-10);
        }
        let eigs = dense_eigs(&l).unwrap();
        prop_assert!(eigs[0] >= -1e-8);
        let x = &x[..g.len()];
        let via_matrix: f64 = (0..g.len()).map(|i| x[i] * (0..g.len()).map(|j| l[(i, j)] * x[j]).sum::<f64>()).sum();
        let edge_sum: f64 = g.edges().iter().map(|e| e.weight * (x[e.u] - x[e.v]).powi(2)).sum();
        prop_assert!((via_matrix - edge_sum).abs() <= 1e-9 * (1.0 + edge_sum));
        prop_assert!((g.quadratic_form(x) - edge_sum).abs() <= 1e-9 * (1.0 + edge_sum));
    }

    #[test]
    fn zero_multiplicity_counts_components(
        parts in prop::collection::vec((1usize..8, 0.2f64..0.8, any::<u64>()), 1..=5)
    ) {
        let graphs: Vec<_> = parts.iter().map(|&(n, p, s)| random_graph(n, p, true, s)).collect();
        let g = compose(&graphs);
        let pairs = spectral::smallest_eigenpairs(&LaplacianOperator::new(&g), g.len()).unwrap();
        let zeros = pairs.iter().filter(|p| p.value.abs() <= 1e-8).count();
        prop_assert_eq!(zeros, graphs.len());
        prop_assert_eq!(g.components().len(), graphs.len());
    }

    #[test]
    fn cheeger_holds_on_connected_graphs(n in 2usize..50, p in 0.05f64..0.5, seed in any::<u64>()) {
        let g = random_graph(n, p, true, seed);
        let report = spectral::cheeger_check(&g).unwrap();
        prop_assert!(report.satisfied, "{report:?}");
    }

    #[test]
    fn refine_meets_the_relevance_constraint((g, r) in with_relevance(30), frac in 0.0f64..1.0) {
        let eta = frac * r.iter().sum::<f64>();
        let s = spectral::refine_subgraph(&g, &RelevanceVector::new(r.clone()).unwrap(), eta, RefineOptions::default()).unwrap();
        let mass: f64 = s.vertices.iter().map(|&v| r[v]).sum();
        prop_assert!(mass >= eta);
        prop_assert!(!s.vertices.is_empty());
        let check = subset_objective(&g, &r, &s.indicator, 1.0);
        prop_assert!((check - s.objective).abs() <= 1e-9 * (1.0 + s.objective));
        for e in s.induced_edges(&g) {
            prop_assert!(s.contains(e.u) && s.contains(e.v));
        }
    }

    #[test]
    fn refine_is_invariant_under_relabeling((g, r) in with_relevance(20), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..g.len()).collect();
        perm.shuffle(&mut hyperrag_core::seeded_rng(seed));
        let eta = 0.5 * r.iter().sum::<f64>();
        let opts = RefineOptions::default();
        let base = spectral::refine_subgraph(&g, &RelevanceVector::new(r.clone()).unwrap(), eta, opts).unwrap();
        let pg = g.permuted(&perm).unwrap();
        let pr: Vec<f64> = perm.iter().map(|&o| r[o]).collect();
        let moved = spectral::refine_subgraph(&pg, &RelevanceVector::new(pr).unwrap(), eta, opts).unwrap();
        let mut back: Vec<usize> = moved.vertices.iter().map(|&v| perm[v]).collect();
        back.sort_unstable();
        prop_assert_eq!(back, base.vertices);
    }
}
