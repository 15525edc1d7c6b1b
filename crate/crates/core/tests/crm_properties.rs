use hyperrag_core::alignment::{KnowledgeItem, Modality, Query};
use hyperrag_core::crm::{self, RelevanceHead};
use proptest::prelude::*;

fn query(dim: usize) -> impl Strategy<Value = Query> {
    (prop::collection::vec(-2.0f64..2.0, dim), prop::collection::vec(-2.0f64..2.0, dim)).prop_map(|(v, t)| Query {
        id: "q".into(),
        visual_features: v,
        text_features: t,
    })
}

fn docs(dim: usize) -> impl Strategy<Value = Vec<KnowledgeItem>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), 1..20).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, features)| KnowledgeItem {
                id: format!("d{i:02}"),
                modality: Modality::Textual,
                features,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn decide_is_monotone(theta in 0.0f64..1.0, s1 in 0.0f64..1.0, bump in 0.0f64..1.0) {
        let s2 = s1 + bump;
        if !crm::decide(s1, theta) {
            prop_assert!(!crm::decide(s2, theta));
        }
        prop_assert!(crm::decide(theta, theta));
    }

    #[test]
    fn max_softmax_lies_between_uniform_and_one(scores in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let s = crm::max_softmax(&scores).unwrap();
        prop_assert!(s <= 1.0 && s >= 1.0 / scores.len() as f64 - 1e-12);
    }

    #[test]
    fn filter_is_a_subset_and_idempotent(q in query(2), d in docs(3), seed in any::<u64>()) {
        let head = RelevanceHead::random(4, 3, 8, seed);
        let refs: Vec<&KnowledgeItem> = d.iter().collect();
        let kept = crm::filter_relevant(&head, &q, &refs).unwrap();
        for (doc, r) in &kept {
            prop_assert!(*r > 0.5);
            prop_assert!(d.iter().any(|x| x.id == doc.id));
        }
        let again_in: Vec<&KnowledgeItem> = kept.iter().map(|(doc, _)| *doc).collect();
        let again = crm::filter_relevant(&head, &q, &again_in).unwrap();
        prop_assert_eq!(again.len(), kept.len());
        for ((a, ra), (b, rb)) in again.iter().zip(&kept) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(ra, rb);
        }
    }

    #[test]
    fn loss_gradient_matches_central_differences(q in query(2), d in docs(3), seed in any::<u64>(), split in 0usize..20) {
        let head = RelevanceHead::random(4, 3, 5, seed);
        let cut = split.min(d.len());
        let ex = crm::CrmExample {
            query: &q,
            positives: d[..cut].iter().collect(),
            negatives: d[cut..].iter().collect(),
        };
        let batch = [ex];
        let (_, grad) = crm::crm_loss_grad(&head, &batch).unwrap();
        let h = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..head.params.len() {
            let mut plus = head.clone();
            let mut minus = head.clone();
            plus.params[i] += h;
            minus.params[i] -= h;
            let fd = (crm::crm_loss(&plus, &batch).unwrap() - crm::crm_loss(&minus, &batch).unwrap()) / (2.0 * h);
            num += (fd - grad[i]).powi(2);
            den += fd * fd;
        }
        let rel = num.sqrt() / den.sqrt().max(1e-3);
        prop_assert!(rel < 1e-4, "relative error {rel}");
    }
}
