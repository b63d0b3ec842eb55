use ippo::config::AlgoConfig;
use ippo::env::{EnvConfig, Environment, GridStagHuntConfig, MatrixGameConfig, SkirmishConfig};
use ippo::networks::{ActorCritic, Categorical, CriticMode};
use ippo::rollout::{sample_action, Rollout, RunningNorm};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(env: &EnvConfig, n_actors: usize, frames: usize, mode: CriticMode) -> (Rollout, ActorCritic) {
    let r = Rollout::new(env, n_actors, 5, frames, true, mode, true).unwrap();
    let algo = AlgoConfig { frames, ..AlgoConfig::default() };
    let n_actions = env.build().unwrap().spec().n_actions;
    let ac = ActorCritic::new(&algo.encoder_config(), r.feat.policy_frame_dim(), r.feat.critic_frame_dim(), n_actions)
        .unwrap();
    (r, ac)
}

fn envs() -> Vec<EnvConfig> {
    vec![
        EnvConfig::MatrixGame(MatrixGameConfig::default()),
        EnvConfig::GridStagHunt(GridStagHuntConfig::default()),
        EnvConfig::Skirmish(SkirmishConfig::default()),
    ]
}

#[test]
fn parallel_and_serial_collection_agree() {
    for env in envs() {
        let (mut par, ac) = setup(&env, 4, 2, CriticMode::Centralized);
        let mut ser = par.clone();
        ser.parallel = false;
        let params = ac.init_parameters(1);
        for _ in 0..3 {
            assert_eq!(par.collect(&ac, &params, 12).unwrap(), ser.collect(&ac, &params, 12).unwrap());
        }
    }
}

#[test]
fn batch_layout_and_counts() {
    let env = EnvConfig::MatrixGame(MatrixGameConfig { horizon: 10, ..Default::default() });
    let (mut r, ac) = setup(&env, 3, 1, CriticMode::Local);
    let params = ac.init_parameters(2);
    let b = r.collect(&ac, &params, 16).unwrap();
    assert_eq!(b.len(), 3 * 16 * 2);
    assert_eq!(b.rewards.len(), 3 * 16);
    assert_eq!(b.policy_obs.len(), b.len() * b.policy_dim);
    assert_eq!(b.bootstrap_values.len(), 3 * 2);
    // Episodes last ten steps, so each window holds one finished episode and
    // the next one carries on into the following call.
    for actor in 0..3 {
        let term: Vec<usize> = (0..16).filter(|&t| b.terminals[actor * 16 + t]).collect();
        assert_eq!(term, vec![9]);
    }
    assert_eq!(b.episodes.len(), 3);
    let b2 = r.collect(&ac, &params, 4).unwrap();
    for actor in 0..3 {
        assert!(b2.terminals[actor * 4 + 3], "second window ends the carried-over episode");
        for agent in 0..2 {
            assert_eq!(b2.bootstrap_values[actor * 2 + agent], 0.0);
        }
    }
}

#[test]
fn old_logp_is_the_recorded_policys_log_probability() {
    for env in envs() {
        let (mut r, ac) = setup(&env, 4, 2, CriticMode::Local);
        let params = ac.init_parameters(7);
        let b = r.collect(&ac, &params, 10).unwrap();
        let dists = ac.policy_forward(&params.theta, &b.policy_obs, b.len()).unwrap();
        for (i, d) in dists.iter().enumerate() {
            let a = b.actions[i];
            assert!((d.log_probs[a] - b.old_logp[i]).abs() <= 1e-12);
            assert!((d.probs[a].ln() - b.old_logp[i]).abs() <= 1e-9);
        }
    }
}

#[test]
fn critic_input_depends_on_mode() {
    let env = EnvConfig::Skirmish(SkirmishConfig::default());
    let (local, _) = setup(&env, 1, 1, CriticMode::Local);
    let (central, _) = setup(&env, 1, 1, CriticMode::Centralized);
    assert_eq!(local.feat.policy_dim(), central.feat.policy_dim());
    assert_eq!(local.feat.critic_dim(), local.feat.policy_dim());
    assert_eq!(central.feat.critic_dim(), central.feat.state_dim + central.feat.n_agents);
}

#[test]
fn running_norm_matches_two_pass_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..3 * 50).map(|_| rand::Rng::random_range(&mut rng, -4.0..9.0)).collect();
    let mut n = RunningNorm::new(3);
    for chunk in data.chunks(3 * 7) {
        n.update(chunk);
    }
    for j in 0..3 {
        let col: Vec<f64> = data.iter().skip(j).step_by(3).copied().collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!((n.mean()[j] - m).abs() < 1e-12);
        assert!((n.var()[j] - v).abs() < 1e-9);
    }
    let far = n.apply(&[1e6, -1e6, 0.0]);
    assert_eq!(&far[..2], &[RunningNorm::CLIP, -RunningNorm::CLIP]);
}

#[test]
fn sampling_rejects_broken_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad = Categorical { probs: vec![f64::NAN, 0.5], log_probs: vec![0.0, 0.0] };
    assert!(sample_action(&bad, &mut rng).is_err());
    let point = Categorical::from_probs(vec![0.0, 1.0, 0.0]);
    assert_eq!(sample_action(&point, &mut rng).unwrap().0, 1);
}

proptest! {
    #[test]
    fn sampling_frequencies_follow_probabilities(weights in prop::collection::vec(0.05f64..1.0, 2..6), seed in 0u64..1000) {
        let total: f64 = weights.iter().sum();
        let d = Categorical::from_probs(weights.iter().map(|w| w / total).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4000;
        let mut counts = vec![0usize; weights.len()];
        for _ in 0..n {
            let (a, lp) = sample_action(&d, &mut rng).unwrap();
            prop_assert_eq!(lp, d.log_probs[a]);
            counts[a] += 1;
        }
        for (c, p) in counts.iter().zip(&d.probs) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            prop_assert!((*c as f64 / n as f64 - p).abs() < 5.0 * sd);
        }
    }
}
