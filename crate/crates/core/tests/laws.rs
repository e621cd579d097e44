//! The scaling-law classifier and the one-neuron toy.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use widthlab::neuron::{decay_after_gap, decay_closed_form, expected_drift, monte_carlo_drift, step, Task, TwoTaskConfig};
use widthlab::scaling_law::{
    asymptotic_loss, classify, compute_optimal_width, constrained_loss, frontier_exponent, largest_small_model,
    largest_small_model_bisect, Scalability, ScalingLawParams,
};

fn params() -> impl Strategy<Value = ScalingLawParams> {
    (0.0f64..3.0, 0.0f64..9.0, 0.0f64..9.0, 0.1f64..1.5, 0.1f64..1.5).prop_map(|(l0, la, lb, alpha, beta)| {
        ScalingLawParams { l0, a: la.exp(), b: lb.exp(), alpha, beta, gamma: None, flops_per_param_token: 6.0 }
    })
}

/// `(N_s, N_l, C, ε)` with at least a thousand tokens for `N_l`.
fn budget() -> impl Strategy<Value = (f64, f64, f64, f64)> {
    (35.0f64..57.0, 0.0f64..1.0, 0.0f64..1.0, -11.0f64..-0.7).prop_map(|(lc, t, s, le)| {
        let c = lc.exp();
        let nl = (7.0 + t * ((c / 6e3).ln() - 7.0)).exp();
        let ns = nl * (s * 9.0 - 9.0).exp();
        (ns, nl, c, le.exp())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn constrained_loss_exceeds_asymptote(p in params(), (ns, _, c, _) in budget()) {
        let lc = constrained_loss(&p, ns, c).unwrap();
        let linf = asymptotic_loss(&p, ns).unwrap();
        prop_assert!(lc >= linf);
        prop_assert!(linf >= p.l0);
    }

    #[test]
    fn closed_form_small_model_matches_bisection(p in params(), (_, nl, c, eps) in budget()) {
        let a = largest_small_model(&p, nl, c, eps).unwrap();
        let b = largest_small_model_bisect(&p, nl, c, eps, 1e-10).unwrap();
        match (a, b) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-6 * a, "{a} vs {b}"),
            (None, None) => {}
            other => prop_assert!(false, "{other:?}"),
        }
        // below N_s* the gap exceeds ε
        if let Some(n) = a {
            let lcl = constrained_loss(&p, nl, c).unwrap();
            prop_assert!(asymptotic_loss(&p, n * 0.99).unwrap() - lcl > eps);
        }
    }

    #[test]
    fn classes_follow_their_definitions(p in params(), (ns, nl, c, eps) in budget()) {
        let lcl = constrained_loss(&p, nl, c).unwrap();
        let lcs = constrained_loss(&p, ns, c).unwrap();
        let linf = asymptotic_loss(&p, ns).unwrap();
        let data = lcs - lcl > 0.0 && linf - lcl < 0.0;
        let model = linf - lcl > eps;
        prop_assert!(!(data && model));
        let want = if model { Scalability::ModelScalingRequired } else if data { Scalability::DataScalable } else { Scalability::Neither };
        prop_assert_eq!(classify(&p, ns, nl, c, eps).unwrap(), want);
    }

    #[test]
    fn optimal_width_is_a_minimum(p in params(), lc in 35.0f64..57.0) {
        let c = lc.exp();
        let n = compute_optimal_width(&p, c).unwrap();
        prop_assume!(n < c / 6e3 && n > 1.0);
        let best = constrained_loss(&p, n, c).unwrap();
        for f in [0.9, 1.1] {
            prop_assert!(constrained_loss(&p, n * f, c).unwrap() >= best * (1.0 - 1e-12));
        }
    }
}

#[test]
fn frontier_exponent_is_harmonic_combination() {
    for (alpha, beta) in [(0.34, 0.28), (0.46, 0.51), (1.0, 0.5)] {
        let p = ScalingLawParams { alpha, beta, ..ScalingLawParams::chinchilla_like(1.69, 406.4, 410.7) };
        let got = frontier_exponent(&p, 1e18, 1e24, 25).unwrap();
        let want = alpha * beta / (alpha + beta);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn rare_direction_decays_exponentially() {
    for eta in [0.01, 0.003, 0.001] {
        for gap in [50, 100, 200] {
            let sim = decay_after_gap(0.1, eta, gap);
            let closed = decay_closed_form(0.1, eta, gap);
            assert!((sim - closed).abs() / closed <= 0.1, "eta {eta}, G {gap}: {sim} vs {closed}");
        }
    }
}

#[test]
fn steps_stay_in_the_quarter_circle() {
    let half_pi = std::f64::consts::FRAC_PI_2;
    for i in 0..=100 {
        let theta = half_pi * i as f64 / 100.0;
        for task in [Task::A, Task::B] {
            let next = step(theta, task, 0.01);
            assert!((0.0..=half_pi).contains(&next));
        }
    }
}

#[test]
fn drift_favours_the_frequent_task() {
    let cfg = TwoTaskConfig::new(0.8, 0.01).unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(12);
    for theta in [0.2, 0.7, 1.3] {
        let (mean, se) = monte_carlo_drift(theta, &cfg, 100_000, &mut rng);
        let want = expected_drift(theta, cfg.p, cfg.q(), cfg.eta);
        assert!(want < 0.0);
        assert!((mean - want).abs() < 4.0 * se, "theta {theta}: {mean} vs {want}");
        assert!(mean < -3.0 * se);
    }
}
