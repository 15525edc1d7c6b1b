use hyperrag_core::alignment::{self, AlignConfig, AlignmentPair, EmbeddingTable, KnowledgeItem, Query};
use hyperrag_core::conformance::three_cluster_corpus;
use hyperrag_core::lorentz;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn geo_loss_is_non_negative(seed in any::<u64>(), dim in 2usize..6) {
        let (corpus, _, _) = three_cluster_corpus(2, 3, 4, seed);
        let table = EmbeddingTable::random(corpus.encoder_dims().unwrap(), dim, seed);
        let grouped = corpus.grouped();
        let pairs: Vec<AlignmentPair<'_>> = grouped
            .iter()
            .map(|(q, items)| AlignmentPair { query: &corpus.queries[*q], positives: items.as_slice() })
            .collect();
        prop_assert!(alignment::geo_loss(&table, &pairs).unwrap() >= 0.0);
    }

    #[test]
    fn topk_agrees_with_exhaustive_scan(seed in any::<u64>(), per in 1usize..40, k in 1usize..50) {
        let (corpus, _, _) = three_cluster_corpus(1, per, 3, seed);
        let table = EmbeddingTable::random(corpus.encoder_dims().unwrap(), 4, seed ^ 1);
        let query: &Query = &corpus.queries[0];
        let got: Vec<&str> = alignment::retrieve_topk(&table, query, &corpus.items, k.min(corpus.items.len()))
            .unwrap()
            .iter()
            .map(|(i, _)| i.id.as_str())
            .collect();
        let qp = table.embed_query(query).unwrap();
        let mut scan: Vec<(f64, &KnowledgeItem)> = corpus
            .items
            .iter()
            .map(|i| (lorentz::geodesic_distance(&qp, &table.embed_item(i).unwrap()), i))
            .collect();
        scan.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        let expect: Vec<&str> = scan.iter().take(k).map(|(_, i)| i.id.as_str()).collect();
        prop_assert_eq!(got, expect);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn line_searched_trace_never_increases(seed in any::<u64>()) {
        let (corpus, _, _) = three_cluster_corpus(3, 6, 4, seed);
        let config = AlignConfig { dim: 4, lr: 0.05, epochs: 30, seed, line_search: true, ..AlignConfig::default() };
        let (_, trace) = alignment::train_alignment(&corpus, &config).unwrap();
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-6, "{} -> {}", w[0], w[1]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn three_cluster_top1_is_within_cluster(seed in any::<u64>()) {
        let (corpus, q_cluster, i_cluster) = three_cluster_corpus(20, 30, 8, seed);
        let config = AlignConfig { dim: 8, lr: 0.01, epochs: 30, batch_size: 16, seed, ..AlignConfig::default() };
        let (table, trace) = alignment::train_alignment(&corpus, &config).unwrap();
        let hits = corpus
            .queries
            .iter()
            .zip(&q_cluster)
            .filter(|(q, c)| {
                let (top, _) = alignment::retrieve_topk(&table, q, &corpus.items, 1).unwrap()[0];
                let idx = corpus.items.iter().position(|i| i.id == top.id).unwrap();
                i_cluster[idx] == **c
            })
            .count();
        let rate = hits as f64 / corpus.queries.len() as f64;
        prop_assert!(rate >= 0.95, "top-1 within-cluster rate {}", rate);
        prop_assert!(*trace.last().unwrap() <= 0.5 * trace[0], "{:?}", trace);
    }
}

/// Independent restarts with line search. Whether they agree on the final
/// loss is printed, not asserted: the loss is not convex in the affine
/// parameters, so distinct minima are allowed.
#[test]
fn restarts_are_recorded() {
    let (corpus, _, _) = three_cluster_corpus(12, 18, 6, 11);
    let finals: Vec<f64> = (0..4)
        .map(|seed| {
            let config = AlignConfig { dim: 6, epochs: 300, seed, line_search: true, ..AlignConfig::default() };
            let (_, trace) = alignment::train_alignment(&corpus, &config).unwrap();
            assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{trace:?}");
            *trace.last().unwrap()
        })
        .collect();
    let spread = finals.iter().cloned().fold(f64::MIN, f64::max) - finals.iter().cloned().fold(f64::MAX, f64::min);
    eprintln!("restart final losses {finals:?}, spread {spread:.3e}, same minimum: {}", spread <= 1e-3);
}
