//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use ippo::autodiff::Graph;
use ippo::config::{AlgoConfig, ValueClipPessimism};
use ippo::losses::{total_objective, Minibatch};
use ippo::networks::{trainable, ActorCritic, EncoderConfig, EncoderKind, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// GAE straight from the summation `A_t = sum_l (gamma lam)^l delta_{t+l}`,
/// truncated at the end of the episode or of the window.
pub fn gae_brute(rewards: &[f64], values: &[f64], terminals: &[bool], bootstrap: f64, gamma: f64, lam: f64) -> Vec<f64> {
    let h = rewards.len();
    let delta = |k: usize| {
        let next = if terminals[k] {
            0.0
        } else if k + 1 < h {
            values[k + 1]
        } else {
            bootstrap
        };
        rewards[k] + gamma * next - values[k]
    };
    (0..h)
        .map(|t| {
            let mut sum = 0.0;
            for k in t..h {
                sum += (gamma * lam).powi((k - t) as i32) * delta(k);
                if terminals[k] {
                    break;
                }
            }
            sum
        })
        .collect()
}

/// One random GAE window: `(rewards, values, terminals, bootstrap, gamma, lam)`.
pub type GaeCase = (Vec<f64>, Vec<f64>, Vec<bool>, f64, f64, f64);

pub fn random_gae_case(rng: &mut ChaCha8Rng) -> GaeCase {
    let h = rng.random_range(1..=64);
    let rewards = (0..h).map(|_| rng.random_range(-5.0..5.0)).collect();
    let values = (0..h).map(|_| rng.random_range(-10.0..10.0)).collect();
    let p_term = rng.random_range(0.0..0.3);
    let terminals = (0..h).map(|_| rng.random_bool(p_term)).collect();
    let bootstrap = rng.random_range(-10.0..10.0);
    let gamma = rng.random_range(0.0..0.999);
    let lam = rng.random_range(0.0..=1.0);
    (rewards, values, terminals, bootstrap, gamma, lam)
}

/// Hand-evaluated `(rho, A, eps, min(rho A, clip(rho, 1-eps, 1+eps) A))`.
pub const POLICY_TABLE: [(f64, f64, f64, f64); 22] = [
    (1.0, 1.0, 0.2, 1.0),
    (1.5, 2.0, 0.2, 2.4),
    (0.5, 2.0, 0.2, 1.0),
    (1.5, -2.0, 0.2, -3.0),
    (0.5, -2.0, 0.2, -1.6),
    (1.1, 3.0, 0.2, 3.3),
    (0.9, -3.0, 0.2, -2.7),
    (1.2, 1.0, 0.2, 1.2),
    (0.8, -1.0, 0.2, -0.8),
    (2.0, 0.5, 0.1, 0.55),
    (0.3, 0.5, 0.1, 0.15),
    (2.0, -0.5, 0.1, -1.0),
    (0.3, -0.5, 0.1, -0.45),
    (1.05, -4.0, 0.1, -4.2),
    (0.95, 4.0, 0.1, 3.8),
    (3.0, 1.0, 0.5, 1.5),
    (0.25, -1.0, 0.5, -0.5),
    (1.0, 0.0, 0.3, 0.0),
    (1.7, -0.2, 0.3, -0.34),
    (0.6, 0.7, 0.3, 0.42),
    (1.25, 2.5, 0.25, 3.125),
    (0.7, -1.5, 0.25, -1.125),
];

/// Hand-evaluated `(v_old, v_new, target, eps, min form, max form)` where
/// the two squared errors are `(v_new - target)^2` and
/// `(v_old + clip(v_new - v_old, -eps, eps) - target)^2`.
pub const VALUE_TABLE: [(f64, f64, f64, f64, f64, f64); 22] = [
    (0.0, 0.0, 0.0, 0.2, 0.0, 0.0),
    (1.0, 1.5, 2.0, 0.2, 0.25, 0.64),
    (1.0, 1.5, 1.0, 0.2, 0.04, 0.25),
    (1.0, 0.5, 0.0, 0.2, 0.25, 0.64),
    (1.0, 0.5, 2.0, 0.2, 1.44, 2.25),
    (0.0, 0.1, 1.0, 0.2, 0.81, 0.81),
    (0.0, -0.1, 1.0, 0.2, 1.21, 1.21),
    (2.0, 3.0, 2.5, 0.2, 0.09, 0.25),
    (2.0, 1.0, 1.5, 0.2, 0.09, 0.25),
    (-1.0, 0.0, 0.0, 0.5, 0.0, 0.25),
    (-1.0, 0.0, -2.0, 0.5, 2.25, 4.0),
    (-1.0, -3.0, -2.0, 0.5, 0.25, 1.0),
    (5.0, 4.0, 0.0, 1.0, 16.0, 16.0),
    (5.0, 4.0, 10.0, 1.0, 36.0, 36.0),
    (0.3, 0.3, -0.7, 0.1, 1.0, 1.0),
    (0.3, 0.9, 0.35, 0.1, 0.0025, 0.3025),
    (0.3, -0.9, 0.35, 0.1, 0.0225, 1.5625),
    (-2.0, -1.0, -1.7, 0.25, 0.0025, 0.49),
    (-2.0, -2.5, -1.7, 0.25, 0.3025, 0.64),
    (1.0, 1.19, 1.1, 0.2, 0.0081, 0.0081),
    (1.0, 1.21, 1.1, 0.2, 0.01, 0.0121),
    (0.0, 2.0, -1.0, 0.3, 1.69, 9.0),
];

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// A random actor-critic, parameter set, minibatch and config for a
/// gradient check over 2 agents and 8 steps.
pub struct GradCase {
    pub ac: ActorCritic,
    pub params: ParameterSet,
    pub mb: Minibatch,
    pub cfg: AlgoConfig,
}

pub fn random_grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_agents, steps, n_actions) = (2, 8, rng.random_range(2..=6));
    let conv = seed % 4 == 3;
    let frames = if conv { 3 } else { rng.random_range(1..=2) };
    let enc = if conv {
        EncoderConfig { kind: EncoderKind::Conv1d, channels: vec![4, 3, 2], frames, strides: [2, 1, 1] }
    } else {
        EncoderConfig { kind: EncoderKind::Mlp, channels: vec![256, 128], frames, strides: [2, 1, 1] }
    };
    // Three conv layers need a frame of at least 9 values.
    let (pd, cd) = if conv {
        (rng.random_range(9..=12), rng.random_range(9..=14))
    } else {
        (rng.random_range(3..=7), rng.random_range(3..=9))
    };
    let ac = ActorCritic::new(&enc, pd, cd, n_actions).unwrap();
    let mut params = ac.init_parameters(seed);
    // Random biases keep pre-activations off relu's kink at exactly zero,
    // where zero-initialised biases behind dead units would put them.
    for (name, t) in params.theta.iter_mut().chain(params.phi.iter_mut()) {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|b| *b = 0.1 * normal(&mut rng));
        }
    }

    let mut cfg = AlgoConfig {
        critic_coef: rng.random_range(0.5..2.0),
        entropy_coef: rng.random_range(0.0..0.05),
        eps_clip: rng.random_range(0.1..0.3),
        policy_clip: rng.random_bool(0.8),
        value_clip: rng.random_bool(0.8),
        ..AlgoConfig::default()
    };
    if rng.random_bool(0.5) {
        cfg.value_clip_pessimism = ValueClipPessimism::ConventionalMax;
    }

    let n = n_agents * steps;
    let policy_obs: Vec<f64> = (0..n * pd * frames).map(|_| normal(&mut rng)).collect();
    let critic_obs: Vec<f64> = (0..n * cd * frames).map(|_| normal(&mut rng)).collect();
    let dists = ac.policy_forward(&params.theta, &policy_obs, n).unwrap();
    let values = ac.value_forward(&params.phi, &critic_obs, n).unwrap();
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_actions)).collect();
    // Perturb the rollout-time quantities so some samples sit in clipped regions.
    let old_logp = actions.iter().zip(&dists).map(|(&a, d)| d.log_probs[a] + 0.3 * normal(&mut rng)).collect();
    let old_values = values.iter().map(|v| v + 0.3 * normal(&mut rng)).collect();
    let value_targets = (0..n).map(|_| normal(&mut rng)).collect();
    let adv = (0..n).map(|_| normal(&mut rng)).collect();
    let agents: Vec<usize> = (0..n).map(|i| i % n_agents).collect();
    let weights = Minibatch::agent_weights(&agents, n_agents);
    let mb = Minibatch { policy_obs, critic_obs, actions, old_logp, old_values, value_targets, adv, weights };
    GradCase { ac, params, mb, cfg }
}

pub fn objective(case: &GradCase, params: &ParameterSet) -> f64 {
    let mut g = Graph::new();
    let theta = trainable(&mut g, &params.theta);
    let phi = trainable(&mut g, &params.phi);
    let (obj, _) = total_objective(&mut g, &case.ac, &theta, &phi, &case.mb, &case.cfg).unwrap();
    g.value(obj).item().unwrap()
}

/// Analytic gradient of the objective, flattened over theta then phi.
pub fn analytic_grad(case: &GradCase) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let theta = trainable(&mut g, &case.params.theta);
    let phi = trainable(&mut g, &case.params.phi);
    let (obj, _) = total_objective(&mut g, &case.ac, &theta, &phi, &case.mb, &case.cfg).unwrap();
    g.backward(obj).unwrap();
    theta.iter().chain(&phi).map(|v| g.grad(*v).unwrap().to_vec()).collect()
}

pub struct GradReport {
    pub checked: usize,
    /// Coordinates skipped because a kink (relu, clip or min) lies within the step.
    pub skipped: usize,
    pub max_rel_err: f64,
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, above the roundoff of a
/// central difference at `FD_STEP` on objectives of order ten.
pub const REL_FLOOR: f64 = 1e-5;

/// Central differences on `per_tensor` random coordinates of every tensor.
/// Where halving the step moves the estimate by more than a tenth of the
/// tolerance, a kink (relu, clip or min) lies within the step; no derivative
/// exists there and the coordinate is skipped.
pub fn check_gradient(case: &GradCase, per_tensor: usize, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6AD);
    let grads = analytic_grad(case);
    let n_theta = case.params.theta.len();
    let mut report = GradReport { checked: 0, skipped: 0, max_rel_err: 0.0 };
    for (k, grad) in grads.iter().enumerate() {
        for _ in 0..per_tensor {
            let i = rng.random_range(0..grad.len());
            let eval = |delta: f64| {
                let mut p = case.params.clone();
                let t = if k < n_theta { &mut p.theta[k].1 } else { &mut p.phi[k - n_theta].1 };
                t.data_mut()[i] += delta;
                objective(case, &p)
            };
            let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
            let (fd, fd_half) = (central(FD_STEP), central(FD_STEP / 2.0));
            let scale = fd.abs().max(grad[i].abs()).max(REL_FLOOR);
            if (fd - fd_half).abs() > 1e-5 * scale {
                report.skipped += 1;
                continue;
            }
            let rel = (fd - grad[i]).abs() / scale;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
