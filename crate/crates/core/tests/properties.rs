use proptest::prelude::*;
use tailshift::{
    likelihood_ratio, next_level, optimal_allocation, u_objective, Point, RngStream, ShiftVector, WeightedBatch,
};

proptest! {
    #[test]
    fn allocation_spends_the_budget(
        pv in prop::collection::vec((0.01f64..1.0, 0.0f64..3.0), 1..12),
        extra in 0usize..500,
    ) {
        let (raw, v): (Vec<f64>, Vec<f64>) = pv.into_iter().unzip();
        let tot: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / tot).collect();
        let n = p.len() + extra;
        let plan = optimal_allocation(&p, &v, n).unwrap();
        prop_assert_eq!(plan.counts.iter().sum::<usize>(), n);
        prop_assert!(plan.counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn level_keeps_at_least_rho(
        resp in prop::collection::vec(-100.0f64..100.0, 10..300),
        rho in 0.01f64..0.99,
        gamma in -50.0f64..150.0,
    ) {
        let level = next_level(&resp, rho, gamma).unwrap();
        prop_assert!(level <= gamma);
        let kept = resp.iter().filter(|&&r| r >= level).count();
        prop_assert!(kept as f64 >= rho * resp.len() as f64 - 1e-9 || level == gamma);
    }

    #[test]
    fn likelihood_ratios_compose(
        x in prop::collection::vec(-4.0f64..4.0, 3),
        a in prop::collection::vec(-2.0f64..2.0, 3),
        b in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let (x, a, b) = (Point(x), ShiftVector(a), ShiftVector(b));
        let zero = ShiftVector::zeros(3);
        let direct = likelihood_ratio(&x, &a, &b).unwrap();
        let via = likelihood_ratio(&x, &a, &zero).unwrap() * likelihood_ratio(&x, &zero, &b).unwrap();
        prop_assert!((direct - via).abs() <= 1e-9 * direct.abs().max(1e-300));
    }

    #[test]
    fn log_objective_hessian_dominates_identity(seed in 0u64..1000, t in prop::collection::vec(-3.0f64..3.0, 2)) {
        let pts = RngStream::new(seed, 0).std_normal_batch(0, 300, 2);
        let resp: Vec<f64> = pts.iter().map(|p| p.0[0] - 0.5 * p.0[1]).collect();
        let b = WeightedBatch::new(pts, resp, ShiftVector(vec![0.3, -0.2]), 0.8).unwrap();
        let u = u_objective(&ShiftVector(t), &b).unwrap();
        let h = &u.hessian;
        let (tr, det) = (h[0][0] + h[1][1], h[0][0] * h[1][1] - h[0][1] * h[1][0]);
        let min_eig = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
        prop_assert!(min_eig >= 1.0 - 1e-9);
    }
}
