use cpgm::gaussian::{kl_conditional, kl_gaussian, merge_gaussian};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn log_density(x: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mu.iter().zip(var))
        .map(|(x, (m, v))| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v))
        .sum()
}

/// `E_q[ln q − ln p]` from `n` samples of `q`.
fn kl_monte_carlo(q_mu: &[f64], q_var: &[f64], p_mu: &[f64], p_var: &[f64], n: usize, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; q_mu.len()];
    let mut acc = 0.0;
    for _ in 0..n {
        for j in 0..x.len() {
            let e: f64 = r.sample(StandardNormal);
            x[j] = q_mu[j] + q_var[j].sqrt() * e;
        }
        acc += log_density(&x, q_mu, q_var) - log_density(&x, p_mu, p_var);
    }
    acc / n as f64
}

#[test]
fn kl_hand_values() {
    assert_eq!(kl_conditional(&[0.3, -1.0], &[1.0, 1.0], &[0.3, -1.0]).unwrap(), 0.0);
    assert!((kl_conditional(&[1.0], &[1.0], &[0.0]).unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(kl_gaussian(&[0.2], &[0.7], &[0.2], &[0.7]).unwrap(), 0.0);
    let v = kl_gaussian(&[1.0], &[0.5], &[0.0], &[1.0]).unwrap();
    assert!((v - 0.5 * (2f64.ln() + 1.5 - 1.0)).abs() < 1e-12);
    assert!((v - 0.59657).abs() < 1e-5);
}

#[test]
fn kl_matches_monte_carlo_within_one_percent() {
    let cases: [(&[f64], &[f64], &[f64], &[f64]); 3] = [
        (&[1.0, -0.5, 0.3], &[0.5, 2.0, 1.3], &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]),
        (&[0.4, 1.5], &[0.3, 0.8], &[-0.6, 0.2], &[1.7, 0.5]),
        (&[2.0], &[0.25], &[0.5], &[2.0]),
    ];
    for (i, (qm, qv, pm, pv)) in cases.into_iter().enumerate() {
        let exact = kl_gaussian(qm, qv, pm, pv).unwrap();
        let mc = kl_monte_carlo(qm, qv, pm, pv, 200_000, i as u64);
        assert!((mc - exact).abs() <= 0.01 * exact, "case {i}: exact {exact}, mc {mc}");
        if pv.iter().all(|&v| v == 1.0) {
            let cond = kl_conditional(qm, qv, pm).unwrap();
            assert!((cond - exact).abs() < 1e-12);
            assert!((mc - cond).abs() <= 0.01 * cond);
        }
    }
}

#[test]
fn kl_rejects_non_positive_variance_and_length_mismatch() {
    assert!(matches!(kl_conditional(&[0.0], &[0.0], &[0.0]), Err(cpgm::Error::Domain(_))));
    assert!(matches!(kl_gaussian(&[0.0], &[1.0], &[0.0], &[-1.0]), Err(cpgm::Error::Domain(_))));
    assert!(matches!(kl_gaussian(&[0.0, 1.0], &[1.0], &[0.0], &[1.0]), Err(cpgm::Error::Shape(_))));
    assert!(matches!(merge_gaussian(&[0.0], &[1.0], &[0.0], &[0.0]), Err(cpgm::Error::Domain(_))));
}

#[test]
fn merge_anchor_and_thousand_random_cases() {
    let (m, v) = merge_gaussian(&[0.0], &[1.0], &[2.0], &[1.0]).unwrap();
    assert!((m[0] - 1.0).abs() < 1e-12 && (v[0] - 0.5).abs() < 1e-12);
    let mut r = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let j = r.random_range(1..6);
        let mu: Vec<f64> = (0..j).map(|_| r.random_range(-5.0..5.0)).collect();
        let mu_t: Vec<f64> = (0..j).map(|_| r.random_range(-5.0..5.0)).collect();
        let var: Vec<f64> = (0..j).map(|_| r.random_range(0.01..10.0)).collect();
        let var_t: Vec<f64> = (0..j).map(|_| r.random_range(0.01..10.0)).collect();
        let (qm, qv) = merge_gaussian(&mu, &var, &mu_t, &var_t).unwrap();
        for d in 0..j {
            // Strictly tighter than either input.
            assert!(qv[d] < var[d].min(var_t[d]));
            // The mean lies between the two inputs.
            assert!(qm[d] >= mu[d].min(mu_t[d]) - 1e-12 && qm[d] <= mu[d].max(mu_t[d]) + 1e-12);
        }
        // Equal variances: midpoint and halved variance.
        let (sm, sv) = merge_gaussian(&mu, &var, &mu_t, &var).unwrap();
        for d in 0..j {
            assert!((sm[d] - 0.5 * (mu[d] + mu_t[d])).abs() < 1e-12);
            assert!((sv[d] - 0.5 * var[d]).abs() < 1e-12 * var[d].max(1.0));
        }
        // A near-infinite top-down variance leaves the bottom-up Gaussian.
        let huge = vec![1e15; j];
        let (im, iv) = merge_gaussian(&mu, &var, &mu_t, &huge).unwrap();
        for d in 0..j {
            assert!((im[d] - mu[d]).abs() < 1e-9 && (iv[d] - var[d]).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_zero_at_equality(
        q in prop::collection::vec((-4.0f64..4.0, 0.05f64..5.0, -4.0f64..4.0, 0.05f64..5.0), 1..6)
    ) {
        let qm: Vec<f64> = q.iter().map(|c| c.0).collect();
        let qv: Vec<f64> = q.iter().map(|c| c.1).collect();
        let pm: Vec<f64> = q.iter().map(|c| c.2).collect();
        let pv: Vec<f64> = q.iter().map(|c| c.3).collect();
        prop_assert!(kl_gaussian(&qm, &qv, &pm, &pv).unwrap() >= -1e-12);
        prop_assert!(kl_conditional(&qm, &qv, &pm).unwrap() >= -1e-12);
        prop_assert!(kl_gaussian(&qm, &qv, &qm, &qv).unwrap().abs() < 1e-12);
    }

    #[test]
    fn merge_is_symmetric(a in -5.0f64..5.0, b in -5.0f64..5.0, va in 0.01f64..10.0, vb in 0.01f64..10.0) {
        let (m1, v1) = merge_gaussian(&[a], &[va], &[b], &[vb]).unwrap();
        let (m2, v2) = merge_gaussian(&[b], &[vb], &[a], &[va]).unwrap();
        prop_assert!((m1[0] - m2[0]).abs() < 1e-12 && (v1[0] - v2[0]).abs() < 1e-12);
    }
}
