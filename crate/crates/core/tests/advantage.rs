mod common;

use common::{gae_brute, random_gae_case};
use ippo::advantage::{gae, mean_std, normalize_advantages, normalize_calls};
use ippo::config::AlgoConfig;
use ippo::env::{EnvConfig, MatrixGameConfig};
use ippo::trainer::Trainer;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn recursion_matches_summation_on_random_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let (r, v, d, boot, gamma, lam) = random_gae_case(&mut rng);
        let (adv, _) = gae(&r, &v, &d, boot, gamma, lam).unwrap();
        for (a, b) in adv.iter().zip(gae_brute(&r, &v, &d, boot, gamma, lam)) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn terminal_step_does_not_bootstrap() {
    let (adv, td) = gae(&[1.0, 2.0], &[0.5, 0.5], &[false, true], 100.0, 0.9, 1.0).unwrap();
    assert_eq!(td[1], 2.0 - 0.5);
    assert!((td[0] - (1.0 + 0.9 * 0.5 - 0.5)).abs() < 1e-15);
    assert!((adv[0] - (td[0] + 0.9 * td[1])).abs() < 1e-15);
}

#[test]
fn truncated_window_bootstraps_from_next_value() {
    let (adv, _) = gae(&[0.0], &[1.0], &[false], 2.0, 0.5, 0.95).unwrap();
    assert!((adv[0] - (0.5 * 2.0 - 1.0)).abs() < 1e-15);
}

#[test]
fn gae_rejects_bad_input() {
    assert!(gae(&[1.0], &[1.0, 2.0], &[false], 0.0, 0.9, 0.9).is_err());
    assert!(gae(&[f64::NAN], &[1.0], &[false], 0.0, 0.9, 0.9).is_err());
}

#[test]
fn degenerate_batches_normalise_to_zero() {
    let mut one = [3.0];
    normalize_advantages(&mut one).unwrap();
    assert_eq!(one, [0.0]);
    let mut flat = [2.5; 6];
    normalize_advantages(&mut flat).unwrap();
    assert_eq!(flat, [0.0; 6]);
    assert!(normalize_advantages(&mut [1.0, f64::INFINITY]).is_err());
}

#[test]
fn normalisation_runs_once_per_iteration() {
    for mini_epochs in [1, 4] {
        let algo = AlgoConfig { mini_epochs, steps_num: 16, mini_batch: 64, ..AlgoConfig::default() };
        let mut t = Trainer::new(EnvConfig::MatrixGame(MatrixGameConfig::default()), algo, 3).unwrap();
        for _ in 0..3 {
            let before = normalize_calls();
            let stats = t.train_iteration().unwrap();
            assert_eq!(normalize_calls() - before, 1, "mini_epochs {mini_epochs}");
            assert!(stats.grad_steps >= mini_epochs);
            assert!(stats.adv_mean.abs() <= 1e-8 && (stats.adv_std - 1.0).abs() <= 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn lambda_one_without_terminals_is_discounted_return_minus_value(
        rewards in prop::collection::vec(-3.0f64..3.0, 1..30), boot in -3.0f64..3.0, gamma in 0.0f64..0.99
    ) {
        let h = rewards.len();
        let values: Vec<f64> = (0..h).map(|t| (t as f64).sin()).collect();
        let (adv, _) = gae(&rewards, &values, &vec![false; h], boot, gamma, 1.0).unwrap();
        for t in 0..h {
            let ret: f64 = (t..h).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum::<f64>()
                + gamma.powi((h - t) as i32) * boot;
            prop_assert!((adv[t] - (ret - values[t])).abs() < 1e-9);
        }
    }

    #[test]
    fn normalised_batch_is_standard(xs in prop::collection::vec(-1e3f64..1e3, 2..200)) {
        let (_, std) = mean_std(&xs);
        prop_assume!(std > 1e-6);
        let mut ys = xs.clone();
        normalize_advantages(&mut ys).unwrap();
        let (m, s) = mean_std(&ys);
        prop_assert!(m.abs() <= 1e-8 && (s - 1.0).abs() <= 1e-6);
    }
}
