use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

use nsg_core::hgnn::random_features;
use nsg_core::moe::{draw_noise, gate, gate_with_noise, load_probability, GateParams};
use nsg_core::numerics::{softplus, top_k_indices, Tensor2};
use nsg_core::rng;

fn three_sigma_ok(observed: f64, p: f64, trials: f64) -> bool {
    let sigma = (p * (1.0 - p) / trials).sqrt();
    (observed - p).abs() <= 3.0 * sigma
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exactly_k_positive_gates_summing_to_one(
        rows in 1usize..12,
        d in 1usize..6,
        ne in 1usize..7,
        k_frac in 0.0f64..1.0,
        scale in 0.1f64..20.0,
        noise in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let k = 1 + ((ne as f64 * k_frac) as usize).min(ne - 1);
        let mut r = rng::stream(seed, "test/gate", 0);
        let x = random_features(rows, d, &mut r);
        let gp = GateParams {
            w_g: random_features(d, ne, &mut r).scale(scale),
            w_n: random_features(d, ne, &mut r),
            k,
            noise_enabled: noise,
        };
        let go = gate(&x, &gp, &mut r).unwrap();
        for row in 0..rows {
            let g = go.gates.row(row);
            prop_assert_eq!(g.iter().filter(|&&v| v > 0.0).count(), k);
            prop_assert!(g.iter().all(|&v| v >= 0.0));
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut want = top_k_indices(go.scores.row(row), k);
            let mut got = go.selected[row].clone();
            want.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }
}

#[test]
fn zero_initialised_gate_selects_uniformly() {
    let (draws, ne, k) = (10_000usize, 5usize, 2usize);
    let gp = GateParams::zeros(3, ne, k).unwrap();
    let x = random_features(draws, 3, &mut rng::stream(1, "test/x", 0));
    let go = gate(&x, &gp, &mut rng::stream(2, "test/noise", 0)).unwrap();
    let mut counts = vec![0usize; ne];
    for sel in &go.selected {
        for &e in sel {
            counts[e] += 1;
        }
    }
    let p = k as f64 / ne as f64;
    for (e, &c) in counts.iter().enumerate() {
        let share = c as f64 / draws as f64;
        assert!(three_sigma_ok(share, p, draws as f64), "expert {e}: {share} vs {p}");
    }
}

#[test]
fn load_probability_matches_monte_carlo() {
    let resamples = 100_000usize;
    let mut r = rng::stream(3, "test/load", 0);
    for case in 0..6u64 {
        let ne = 3 + (case as usize % 3);
        let k = 1 + case as usize % 2;
        let clean: Vec<f64> = (0..ne).map(|_| r.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..ne).map(|_| r.random_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = raw.iter().map(|&v| softplus(v)).collect();
        let eps = draw_noise(1, ne, true, &mut r);
        let realized: Vec<f64> = (0..ne).map(|e| clean[e] + eps[(0, e)] * scale[e]).collect();
        for e in 0..ne {
            let p = load_probability(&clean, &scale, e, &realized, k);
            let mut hits = 0usize;
            let mut s = realized.clone();
            for _ in 0..resamples {
                let z: f64 = r.sample(StandardNormal);
                s[e] = clean[e] + z * scale[e];
                if top_k_indices(&s, k).contains(&e) {
                    hits += 1;
                }
            }
            let mc = hits as f64 / resamples as f64;
            let sigma = (p * (1.0 - p) / resamples as f64).sqrt().max(1.0 / resamples as f64);
            assert!(
                (mc - p).abs() <= 3.0 * sigma,
                "case {case} expert {e}: analytic {p} vs Monte Carlo {mc}"
            );
        }
    }
}

#[test]
fn explicit_noise_reproduces_sampled_gate() {
    let mut r = rng::stream(9, "test/x", 0);
    let x = random_features(7, 4, &mut r);
    let gp = GateParams {
        w_g: random_features(4, 4, &mut r),
        w_n: random_features(4, 4, &mut r),
        k: 2,
        noise_enabled: true,
    };
    let sampled = gate(&x, &gp, &mut rng::stream(10, "test/noise", 0)).unwrap();
    let replay = gate_with_noise(&x, &gp, sampled.eps.clone()).unwrap();
    assert_eq!(sampled, replay);
    let clean = gate_with_noise(&x, &gp, Tensor2::zeros(7, 4)).unwrap();
    assert_eq!(clean.scores, clean.clean);
}
