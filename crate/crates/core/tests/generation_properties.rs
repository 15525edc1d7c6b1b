use hyperrag_core::alignment::Query;
use hyperrag_core::generation::{self, GenConfig, ToyGenerator, TokenDistributionSequence, TokenSequence};
use proptest::prelude::*;

fn distribution_rows(len: usize, vocab: usize) -> impl Strategy<Value = TokenDistributionSequence> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, vocab), len).prop_map(|rows| {
        let rows = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect();
        TokenDistributionSequence::new(rows).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn gen_loss_is_a_convex_combination(a in 0.0f64..50.0, b in 0.0f64..50.0, alpha in 0.001f64..0.999) {
        let v = generation::gen_loss(a, b, alpha).unwrap();
        prop_assert!(v >= a.min(b) && v <= a.max(b));
    }

    #[test]
    fn local_loss_is_non_negative_and_bounded_by_clamp(
        (pred, target) in (1usize..6, 2usize..8).prop_flat_map(|(len, vocab)| {
            (distribution_rows(len, vocab), prop::collection::vec(0..vocab, len))
        })
    ) {
        let vocab = pred.rows()[0].len();
        let target = TokenSequence::new(target, vocab).unwrap();
        let l = generation::local_loss(&pred, &target).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(l <= pred.len() as f64 * -(1e-12f64).ln() + 1e-9);
    }

    #[test]
    fn dropout_probability_decays(t in 0u64..10_000, decay in 1.0f64..1_000.0) {
        let p = generation::query_dropout_prob(t, decay).unwrap();
        let next = generation::query_dropout_prob(t + 1, decay).unwrap();
        prop_assert!(p <= 0.5 && p > 0.0 || t as f64 > 700.0 * decay);
        prop_assert!(next <= p);
    }
}

#[test]
fn empirical_mask_rate_matches_probability() {
    let q = Query {
        id: "q".into(),
        visual_features: vec![1.0; 3],
        text_features: vec![1.0; 3],
    };
    let draws = 10_000u64;
    let mut masked = 0usize;
    for seed in 0..draws {
        let out = generation::apply_query_dropout(&q, 0.3, generation::dropout_seed(11, seed, 0));
        masked += usize::from(out.visual_features.iter().all(|&x| x == 0.0));
        masked += usize::from(out.text_features.iter().all(|&x| x == 0.0));
    }
    let rate = masked as f64 / (2 * draws) as f64;
    assert!((rate - 0.3).abs() <= 0.02, "mask rate {rate}");
}

#[test]
fn memorizable_set_is_learned() {
    let data = generation::synthetic_qa(50, 6, 3, 4, 2, 5).unwrap();
    let gen = ToyGenerator::new(6, 3, 8, 2, 4, 5).unwrap();
    let config = GenConfig { epochs: 150, batch_size: 10, seed: 5, ..GenConfig::default() };
    let (trained, trace) = generation::train_generation(gen, &data, &config).unwrap();
    let first = &trace.epochs[0];
    let last = trace.epochs.last().unwrap();
    let em = generation::exact_match(&trained, &data).unwrap();
    assert!(em >= 0.9, "exact match {em}");
    assert!(last.local <= 0.5 * first.local, "{first:?} -> {last:?}");
    assert!(last.global <= 0.5 * first.global, "{first:?} -> {last:?}");
}
