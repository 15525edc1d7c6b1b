use hyperrag_core::conformance::ot_bruteforce;
use hyperrag_core::transport::{self, EmpiricalDistribution};
use proptest::prelude::*;

fn distribution(dim: usize, max_len: usize) -> impl Strategy<Value = EmpiricalDistribution> {
    (1..=max_len)
        .prop_flat_map(move |n| {
            (
                prop::collection::vec(prop::collection::vec(-2.0f64..2.0, dim), n),
                prop::collection::vec(0.05f64..1.0, n),
            )
        })
        .prop_map(|(support, raw)| {
            let s: f64 = raw.iter().sum();
            EmpiricalDistribution::new(support, raw.into_iter().map(|w| w / s).collect()).unwrap()
        })
}

fn three(max_len: usize) -> impl Strategy<Value = (EmpiricalDistribution, EmpiricalDistribution, EmpiricalDistribution)> {
    (1usize..4).prop_flat_map(move |d| (distribution(d, max_len), distribution(d, max_len), distribution(d, max_len)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn w2_is_a_metric((p, q, r) in three(6)) {
        let w = |a: &EmpiricalDistribution, b: &EmpiricalDistribution| transport::wasserstein2_exact(a, b).unwrap().0;
        let (pq, qp) = (w(&p, &q), w(&q, &p));
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - qp).abs() <= 1e-9);
        prop_assert!(w(&p, &p) <= 1e-8);
        prop_assert!(w(&p, &r) <= pq + w(&q, &r) + 1e-7);
    }

    #[test]
    fn exact_matches_enumeration((p, q, _) in three(4)) {
        prop_assume!(p.len() * q.len() <= 20);
        let oracle = ot_bruteforce(&p, &q).unwrap();
        let (w, _) = transport::wasserstein2_exact(&p, &q).unwrap();
        prop_assert!((oracle - w).abs() <= 1e-9, "{oracle} vs {w}");
    }

    #[test]
    fn plans_respect_marginals((p, q, _) in three(8)) {
        let (_, exact) = transport::wasserstein2_exact(&p, &q).unwrap();
        prop_assert!(exact.marginal_violation(p.weights(), q.weights()) <= 1e-6);
        let s = transport::wasserstein2_sinkhorn(&p, &q, 0.05, 10_000).unwrap();
        prop_assert!(s.converged);
        prop_assert!(s.plan.marginal_violation(p.weights(), q.weights()) <= 1e-6);
        for i in 0..p.len() {
            for j in 0..q.len() {
                prop_assert!(exact.get(i, j) >= 0.0 && s.plan.get(i, j) >= 0.0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    // Entropic objective is monotone in epsilon and bounded below by W2^2.
    #[test]
    fn sinkhorn_approaches_exact_as_epsilon_shrinks((p, q, _) in three(6)) {
        let exact = transport::wasserstein2_exact(&p, &q).unwrap().0;
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001] {
            let s = transport::wasserstein2_sinkhorn(&p, &q, eps, 10_000).unwrap();
            let gap = (s.objective.max(0.0).sqrt() - exact).abs();
            prop_assert!(s.objective.max(0.0).sqrt() >= exact - 1e-6);
            prop_assert!(gap <= prev + 1e-6, "eps {eps}: gap {gap} after {prev}");
            prev = gap;
        }
    }
}
