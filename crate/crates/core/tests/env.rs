use ippo::env::{EnvConfig, Environment, GridStagHuntConfig, MatrixGameConfig, SkirmishConfig, HARE, STAG};
use proptest::prelude::*;

fn configs() -> Vec<EnvConfig> {
    vec![
        EnvConfig::MatrixGame(MatrixGameConfig { penalty: -2.0, ..Default::default() }),
        EnvConfig::GridStagHunt(GridStagHuntConfig::default()),
        EnvConfig::Skirmish(SkirmishConfig::default()),
    ]
}

#[test]
fn matrix_payoffs() {
    let mut env = EnvConfig::MatrixGame(MatrixGameConfig { penalty: -2.0, horizon: 3, ..Default::default() })
        .build()
        .unwrap();
    env.reset(0);
    assert_eq!(env.step(&[STAG, STAG]).unwrap().reward, 4.0);
    assert_eq!(env.step(&[STAG, HARE]).unwrap().reward, -2.0);
    let last = env.step(&[HARE, HARE]).unwrap();
    assert_eq!(last.reward, 1.0);
    assert!(last.terminal);
}

#[test]
fn bad_configs_are_rejected() {
    assert!(EnvConfig::Skirmish(SkirmishConfig { size: 1, ..Default::default() }).validate().is_err());
    assert!(EnvConfig::MatrixGame(MatrixGameConfig { horizon: 0, ..Default::default() }).validate().is_err());
    assert!(EnvConfig::MatrixGame(MatrixGameConfig { payoff: Some(vec![vec![1.0, 2.0]]), ..Default::default() })
        .validate()
        .is_err());
}

proptest! {
    #[test]
    fn episodes_respect_the_spec(which in 0usize..3, seed in 0u64..10_000, actions in prop::collection::vec(0usize..64, 200)) {
        let mut env = configs()[which].build().unwrap();
        let spec = env.spec();
        let first = env.reset(seed);
        prop_assert_eq!(&first, &env.reset(seed));
        let mut tr = first;
        let mut steps = 0;
        let mut k = 0;
        while !tr.terminal {
            prop_assert_eq!(tr.obs.len(), spec.n_agents);
            prop_assert!(tr.obs.iter().all(|o| o.len() == spec.obs_dim && o.iter().all(|v| v.is_finite())));
            prop_assert_eq!(tr.state.len(), spec.state_dim);
            prop_assert_eq!(tr.won, None);
            let joint: Vec<usize> = (0..spec.n_agents).map(|_| { k += 1; actions[k % actions.len()] % spec.n_actions }).collect();
            tr = env.step(&joint).unwrap();
            prop_assert!(tr.reward.is_finite());
            steps += 1;
            prop_assert_eq!(env.steps(), steps);
        }
        prop_assert!(steps <= spec.episode_limit);
        prop_assert!(env.step(&vec![0; spec.n_agents]).is_err(), "stepping a finished episode must fail");
        env.reset(seed);
        prop_assert!(env.step(&vec![spec.n_actions; spec.n_agents]).is_err());
        prop_assert!(env.step(&[0]).is_err() || spec.n_agents == 1);
    }
}
