use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use diffgate::autodiff::finite_difference_grad;
use diffgate::gates::{self, UtilityMap};
use diffgate::{Graph, Tensor};

fn utility() -> impl Strategy<Value = UtilityMap> {
    prop_oneof![Just(UtilityMap::Sigmoid), Just(UtilityMap::Softmax)]
}

fn phi(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn graph_and_plain_transforms_agree(
        s in prop::collection::vec(-4.0f64..4.0, 2..16),
        beta in 0.01f64..0.5,
        zeta in 0.0f64..5.0,
        utility in utility(),
    ) {
        let plain = gates::gate_transform(&s, beta, zeta, utility).unwrap();
        let mut g = Graph::new();
        let sv = g.leaf(Tensor::vector(s.clone()));
        let zv = g.leaf(Tensor::scalar(zeta));
        let graph = gates::gate_transform_graph(&mut g, sv, beta, zv, utility).unwrap();
        prop_assert_eq!(&graph.output.active_mask, &plain.active_mask);
        for (a, b) in graph.output.z.iter().zip(&plain.z) {
            prop_assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn gates_are_zero_or_near_one(
        s in prop::collection::vec(-4.0f64..4.0, 2..16),
        beta in 0.01f64..0.99,
        zeta in 0.0f64..5.0,
        utility in utility(),
    ) {
        prop_assume!(utility == UtilityMap::Sigmoid || beta < 0.5);
        let out = gates::gate_transform(&s, beta, zeta, utility).unwrap();
        let half_width = (-zeta).exp();
        for (&z, &on) in out.z.iter().zip(&out.active_mask) {
            if on {
                prop_assert!(z > 1.0 - half_width && z < 1.0 + half_width);
            } else {
                prop_assert_eq!(z, 0.0);
            }
        }
        if let Some(m) = out.active_mean() {
            prop_assert!((m - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_probability_matches_statrs(
        mu in -3.0f64..3.0,
        sigma in 0.05f64..3.0,
        beta in 0.01f64..0.99,
    ) {
        // statrs' erf is good to about 1e-12 in the upper tail.
        let want = phi((mu - (beta / (1.0 - beta)).ln()) / sigma);
        prop_assert!((gates::prob_enabled_sigmoid(mu, sigma, beta) - want).abs() <= 1e-10);
    }

    #[test]
    fn softmax_probability_matches_direct_formula(
        mu in prop::collection::vec(-3.0f64..3.0, 2..8),
        sigma in 0.05f64..3.0,
        beta in 0.01f64..0.9,
    ) {
        let probs = gates::prob_enabled(&mu, sigma, beta, UtilityMap::Softmax);
        for (k, p) in probs.iter().enumerate() {
            let rest: f64 = mu.iter().enumerate().filter(|(l, _)| *l != k).map(|(_, m)| m.exp()).sum();
            let want = phi((mu[k] - (beta / (1.0 - beta)).ln() - rest.ln()) / sigma);
            prop_assert!((p - want).abs() <= 1e-10, "k={} {} vs {}", k, p, want);
            prop_assert!((gates::prob_enabled_softmax(&mu, k, sigma, beta) - p).abs() <= 1e-15);
        }
    }

    #[test]
    fn probability_gradient_matches_finite_differences(
        mu in prop::collection::vec(-2.0f64..2.0, 2..6),
        sigma in 0.3f64..2.0,
        beta in 0.05f64..0.45,
        utility in utility(),
    ) {
        let mut g = Graph::new();
        let m = g.leaf(Tensor::vector(mu.clone()));
        let p = gates::prob_enabled_graph(&mut g, m, sigma, beta, utility).unwrap();
        let total = g.sum(p).unwrap();
        let analytic = g.backward(total).unwrap().grad(m);
        let numeric = finite_difference_grad(
            |x| gates::prob_enabled(x, sigma, beta, utility).iter().sum(),
            &mu,
            1e-6,
        );
        for (a, n) in analytic.data().iter().zip(&numeric) {
            prop_assert!((a - n).abs() <= 1e-7 * (1.0 + n.abs()));
        }
    }
}

#[test]
fn infinite_zeta_gives_exact_ones() {
    let out =
        gates::gate_transform(&[2.0, 1.0, -3.0], 0.2, f64::INFINITY, UtilityMap::Sigmoid).unwrap();
    assert_eq!(out.z, vec![1.0, 1.0, 0.0]);
}

#[test]
fn nothing_active_is_all_zero_and_degenerate() {
    let out = gates::gate_transform(&[-5.0, -6.0], 0.5, 0.0, UtilityMap::Sigmoid).unwrap();
    assert_eq!(out.z, vec![0.0, 0.0]);
    assert!(out.degenerate);
    assert_eq!(out.active_mean(), None);
}

#[test]
fn single_active_gate_is_exactly_one() {
    let out = gates::gate_transform(&[3.0, -6.0, -7.0], 0.5, 0.0, UtilityMap::Sigmoid).unwrap();
    assert_eq!(out.z[0], 1.0);
    assert!(out.degenerate);
}

#[test]
fn invalid_arguments_are_rejected() {
    for beta in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(gates::gate_transform(&[0.0, 1.0], beta, 0.0, UtilityMap::Sigmoid).is_err());
    }
    assert!(gates::gate_transform(&[0.0, 1.0], 0.5, -1.0, UtilityMap::Sigmoid).is_err());
    assert!(gates::gate_transform(&[0.0], 0.5, 0.0, UtilityMap::Sigmoid).is_err());
}

#[test]
fn raising_zeta_by_ln2_quarters_the_variance() {
    let s = [1.5, 0.2, -0.4, 0.9, 2.2];
    let var = |zeta: f64| {
        let out = gates::gate_transform(&s, 0.3, zeta, UtilityMap::Sigmoid).unwrap();
        let on: Vec<f64> = out
            .z
            .iter()
            .zip(&out.active_mask)
            .filter(|(_, &a)| a)
            .map(|(z, _)| *z)
            .collect();
        let m = on.iter().sum::<f64>() / on.len() as f64;
        on.iter().map(|z| (z - m).powi(2)).sum::<f64>() / on.len() as f64
    };
    let ratio = var(0.7) / var(0.7 + std::f64::consts::LN_2);
    assert!((ratio - 4.0).abs() < 1e-12, "{ratio}");
}

#[test]
fn initial_beta_keeps_every_gate_on() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for utility in [UtilityMap::Sigmoid, UtilityMap::Softmax] {
        let mu = gates::init_mu(50, &mut rng).unwrap();
        assert!(mu.iter().all(|m| m.abs() <= 0.1));
        let beta = gates::init_beta(&mu, utility).unwrap();
        let out = gates::gate_transform(&mu, beta, 0.0, utility).unwrap();
        assert_eq!(out.n_active, 50);
    }
}
