use hyperrag_core::lorentz::{self, project_to_hyperboloid, LorentzPoint};
use proptest::prelude::*;

fn point(n: usize) -> impl Strategy<Value = LorentzPoint> {
    prop::collection::vec(-3.0f64..3.0, n).prop_map(|v| project_to_hyperboloid(&v).unwrap())
}

fn triple() -> impl Strategy<Value = (LorentzPoint, LorentzPoint, LorentzPoint)> {
    (2usize..6).prop_flat_map(|n| (point(n), point(n), point(n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metric_axioms((x, y, z) in triple()) {
        let dxy = lorentz::geodesic_distance(&x, &y);
        prop_assert!(dxy >= 0.0);
        prop_assert_eq!(dxy, lorentz::geodesic_distance(&y, &x));
        prop_assert!(lorentz::geodesic_distance(&x, &x) <= 1e-9);
        let dxz = lorentz::geodesic_distance(&x, &z);
        let dyz = lorentz::geodesic_distance(&y, &z);
        prop_assert!(dxz <= dxy + dyz + 1e-9, "{dxz} > {dxy} + {dyz}");
        let gap = x.coords().iter().zip(y.coords()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if gap > 1e-6 {
            prop_assert!(dxy > 1e-9);
        }
    }

    #[test]
    fn exp_inverts_log((x, y, _) in triple()) {
        prop_assume!(lorentz::geodesic_distance(&x, &y) <= 10.0);
        let back = lorentz::exp_map(&x, &lorentz::log_map(&x, &y).unwrap()).unwrap();
        for (a, b) in back.coords().iter().zip(y.coords()) {
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn riemannian_gradient_is_tangent(
        (x, g) in (2usize..6).prop_flat_map(|n| (point(n), prop::collection::vec(-5.0f64..5.0, n + 1)))
    ) {
        let u = lorentz::riemannian_gradient(&x, &g).unwrap();
        let ip = lorentz::lorentz_inner(x.coords(), u.components()).unwrap();
        prop_assert!(ip.abs() <= 1e-10 * (1.0 + u.norm()) * x.time(), "{ip}");
    }

    // Far from the origin |<x,x>_L + 1| is dominated by rounding of order
    // eps * x0^2, so inputs stay where x0 is at most a few hundred.
    #[test]
    fn rsgd_stays_on_the_manifold(
        (x, g, lr) in (2usize..6).prop_flat_map(|n| (point(n), prop::collection::vec(-1.0f64..1.0, n + 1), 1e-4f64..0.05))
    ) {
        let y = lorentz::rsgd_step(&x, &g, lr).unwrap();
        prop_assert!(y.constraint_violation() <= 1e-9, "violation {} at x0 {}", y.constraint_violation(), y.time());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distance_gradient_matches_central_differences(
        (x, y) in (2usize..5).prop_flat_map(|n| (point(n), point(n)))
    ) {
        let d = lorentz::geodesic_distance(&x, &y);
        prop_assume!((0.01..=5.0).contains(&d));
        let analytic = lorentz::distance_grad_space(&x, &y);
        let h = 1e-6;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.space().len() {
            let mut plus = x.space().to_vec();
            let mut minus = plus.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (lorentz::geodesic_distance(&project_to_hyperboloid(&plus).unwrap(), &y)
                - lorentz::geodesic_distance(&project_to_hyperboloid(&minus).unwrap(), &y))
                / (2.0 * h);
            num += (fd - analytic[i]).powi(2);
            den += fd * fd;
        }
        let rel = num.sqrt() / den.sqrt().max(1e-3);
        prop_assert!(rel < 1e-4, "relative error {rel}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn rsgd_walk_of_1000_steps_keeps_the_constraint(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = hyperrag_core::seeded_rng(seed);
        let mut x = project_to_hyperboloid(&[0.5, -0.3, 0.2]).unwrap();
        for _ in 0..1000 {
            let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            x = lorentz::rsgd_step(&x, &g, 0.01).unwrap();
            prop_assert!(x.constraint_violation() <= 1e-9);
        }
    }
}
