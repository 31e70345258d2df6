use distrisk_core::quantile::{pinball_loss, project_discrete, wasserstein1, QuantileDistribution};
use distrisk_core::risk::{distorted_expectation, distorted_value_slice, distortion_weights, Metric, RiskSpec};
use proptest::prelude::*;

fn spec() -> impl Strategy<Value = RiskSpec> {
    (0..3usize, 0.0..=1.0f64).prop_map(|(m, u)| {
        let metric = [Metric::Neutral, Metric::Wang, Metric::Cvar][m];
        let (lo, hi) = metric.training_range();
        RiskSpec::new(metric, lo + u * (hi - lo)).unwrap()
    })
}

fn dist(n: usize) -> impl Strategy<Value = QuantileDistribution> {
    prop::collection::vec(-50.0..50.0f64, n).prop_map(|v| QuantileDistribution::new(v).unwrap())
}

proptest! {
    #[test]
    fn equal_probabilities_match_the_quantile_form(sp in spec(), z in prop::collection::vec(-50.0..50.0f64, 1..40)) {
        let p = vec![1.0 / z.len() as f64; z.len()];
        let a = distorted_expectation(&z, &p, &sp).unwrap();
        let b = distorted_value_slice(&z, &sp);
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn neutral_weights_are_uniform(n in 1..200usize) {
        let w = distortion_weights(&RiskSpec::neutral(), n).unwrap();
        prop_assert!(w.iter().all(|&x| (x - 1.0 / n as f64).abs() < 1e-15));
    }

    #[test]
    fn distorted_value_lies_within_the_support(sp in spec(), z in prop::collection::vec(-50.0..50.0f64, 1..40)) {
        let v = distorted_value_slice(&z, &sp);
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-9 <= v && v <= hi + 1e-9);
    }

    #[test]
    fn wasserstein_is_a_metric((a, b, c) in (1..24usize).prop_flat_map(|n| (dist(n), dist(n), dist(n)))) {
        let d = |x: &QuantileDistribution, y: &QuantileDistribution| wasserstein1(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn projection_of_equal_atoms_is_identity(z in prop::collection::vec(-50.0..50.0f64, 1..40)) {
        let p = vec![1.0 / z.len() as f64; z.len()];
        let q = project_discrete(&z, &p, z.len()).unwrap();
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(q.quantiles(), &sorted[..]);
    }

    #[test]
    fn pinball_gradient_pushes_each_head_toward_its_quantile(
        pred in prop::collection::vec(-5.0..5.0f64, 1..16),
        targets in prop::collection::vec(-5.0..5.0f64, 1..32),
    ) {
        let (_, g) = pinball_loss(&pred, &targets, 0.0).unwrap();
        let n = pred.len() as f64;
        let m = targets.len() as f64;
        for (i, (&p, &gi)) in pred.iter().zip(&g).enumerate() {
            let tau = (2 * i + 1) as f64 / (2.0 * n);
            let below = targets.iter().filter(|&&t| t < p).count() as f64 / m;
            // d/dp mean_j rho_tau(t_j - p) = P(t < p) - tau, split over n heads
            prop_assert!((gi - (below - tau) / n).abs() < 1e-12, "head {i}: {gi}");
        }
    }
}
