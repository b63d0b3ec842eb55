//! Clipped policy surrogate, clipped value loss and entropy bonus.
//!
//! Each term is a weighted sum over samples; passing `1/n` weights gives the
//! plain mean, and per-agent `1/n_a` weights give a sum of per-agent means.

use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{AlgoConfig, ValueClipPessimism};
use crate::error::{Error, Result};
use crate::networks::{ActorCritic, Categorical};

fn vector(g: &mut Graph, xs: &[f64]) -> Result<Var> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("loss input contains a non-finite value".into()));
    }
    Ok(g.constant(Tensor::from_vec(xs.to_vec())))
}

fn weighted_sum(g: &mut Graph, x: Var, weights: &[f64]) -> Result<Var> {
    let w = vector(g, weights)?;
    let wx = g.mul(x, w)?;
    g.sum(wx)
}

/// Clipped surrogate `sum_i w_i min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)`
/// with `rho = exp(new_logp - old_logp)`; to be maximised. Without clipping
/// it is `sum_i w_i rho_i A_i`.
pub fn policy_surrogate(
    g: &mut Graph,
    new_logp: Var,
    old_logp: &[f64],
    adv: &[f64],
    weights: &[f64],
    eps_clip: f64,
    clip: bool,
) -> Result<Var> {
    let old = vector(g, old_logp)?;
    let a = vector(g, adv)?;
    let diff = g.sub(new_logp, old)?;
    let ratio = g.exp(diff)?;
    let surr = g.mul(ratio, a)?;
    let surr = if clip {
        let clipped = g.clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip)?;
        let clipped = g.mul(clipped, a)?;
        g.min(surr, clipped)?
    } else {
        surr
    };
    weighted_sum(g, surr, weights)
}

/// Value loss to be minimised. With clipping the per-sample term combines
/// `(v - target)^2` and `(v_old + clip(v - v_old, -eps, eps) - target)^2`
/// by `min` or `max` according to `pessimism`; without it, the squared error.
#[allow(clippy::too_many_arguments)]
pub fn value_loss(
    g: &mut Graph,
    v_new: Var,
    v_old: &[f64],
    target: &[f64],
    weights: &[f64],
    eps_clip: f64,
    clip: bool,
    pessimism: ValueClipPessimism,
) -> Result<Var> {
    let t = vector(g, target)?;
    let err = g.sub(v_new, t)?;
    let sq = g.square(err)?;
    let per_sample = if clip {
        let old = vector(g, v_old)?;
        let delta = g.sub(v_new, old)?;
        let delta = g.clamp(delta, -eps_clip, eps_clip)?;
        let clipped = g.add(old, delta)?;
        let clipped = g.sub(clipped, t)?;
        let clipped_sq = g.square(clipped)?;
        match pessimism {
            ValueClipPessimism::PaperMin => g.min(sq, clipped_sq)?,
            ValueClipPessimism::ConventionalMax => {
                let a = g.scale(sq, -1.0)?;
                let b = g.scale(clipped_sq, -1.0)?;
                let m = g.min(a, b)?;
                g.scale(m, -1.0)?
            }
        }
    } else {
        sq
    };
    weighted_sum(g, per_sample, weights)
}

/// Weighted policy entropy from logits `[batch, n_actions]`.
pub fn entropy(g: &mut Graph, logits: Var, weights: &[f64]) -> Result<Var> {
    let p = g.softmax(logits)?;
    let logp = g.log_softmax(logits)?;
    let plogp = g.mul(p, logp)?;
    let neg_h = g.sum_last_axis(plogp)?;
    let h = g.scale(neg_h, -1.0)?;
    weighted_sum(g, h, weights)
}

/// Mean Shannon entropy (natural log) of plain distributions.
pub fn entropy_bonus(dists: &[Categorical]) -> f64 {
    if dists.is_empty() {
        return 0.0;
    }
    dists.iter().map(Categorical::entropy).sum::<f64>() / dists.len() as f64
}

/// A minibatch of flattened samples as the update sees them.
#[derive(Debug, Clone, Default)]
pub struct Minibatch {
    pub policy_obs: Vec<f64>,
    pub critic_obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub old_values: Vec<f64>,
    pub value_targets: Vec<f64>,
    /// Normalised advantages.
    pub adv: Vec<f64>,
    /// `1 / (samples of this agent in the minibatch)`.
    pub weights: Vec<f64>,
}

impl Minibatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Per-agent mean weights for samples owned by `agents`.
    pub fn agent_weights(agents: &[usize], n_agents: usize) -> Vec<f64> {
        let mut counts = vec![0usize; n_agents];
        for &a in agents {
            counts[a] += 1;
        }
        agents.iter().map(|&a| 1.0 / counts[a] as f64).collect()
    }
}

/// Values of the individual terms, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub objective: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    /// Fraction of samples whose ratio left `[1-eps, 1+eps]`.
    pub clip_fraction: f64,
}

/// `sum_a [policy_a - critic_coef * value_a + entropy_coef * entropy_a]`,
/// the quantity the update maximises. `theta` and `phi` are the parameter
/// variables on `g`.
pub fn total_objective(
    g: &mut Graph,
    ac: &ActorCritic,
    theta: &[Var],
    phi: &[Var],
    mb: &Minibatch,
    cfg: &AlgoConfig,
) -> Result<(Var, LossStats)> {
    let n = mb.len();
    if n == 0 {
        return Err(Error::Shape("empty minibatch".into()));
    }
    let x_pi = crate::networks::input_matrix(g, &mb.policy_obs, n, ac.actor.input_dim())?;
    let x_v = crate::networks::input_matrix(g, &mb.critic_obs, n, ac.critic.input_dim())?;

    let logits = ac.policy_logits(g, theta, x_pi)?;
    let logp_all = g.log_softmax(logits)?;
    let new_logp = g.gather(logp_all, mb.actions.clone())?;
    let pol = policy_surrogate(g, new_logp, &mb.old_logp, &mb.adv, &mb.weights, cfg.eps_clip, cfg.policy_clip)?;

    let v = ac.values(g, phi, x_v)?;
    let val = value_loss(
        g,
        v,
        &mb.old_values,
        &mb.value_targets,
        &mb.weights,
        cfg.eps_clip,
        cfg.value_clip,
        cfg.value_clip_pessimism,
    )?;
    let ent = entropy(g, logits, &mb.weights)?;

    let v_term = g.scale(val, -cfg.critic_coef)?;
    let e_term = g.scale(ent, cfg.entropy_coef)?;
    let obj = g.add(pol, v_term)?;
    let obj = g.add(obj, e_term)?;

    let clipped = g
        .value(new_logp)
        .data()
        .iter()
        .zip(&mb.old_logp)
        .filter(|(&new, &old)| ((new - old).exp() - 1.0).abs() > cfg.eps_clip)
        .count();
    let stats = LossStats {
        objective: g.value(obj).item()?,
        policy: g.value(pol).item()?,
        value: g.value(val).item()?,
        entropy: g.value(ent).item()?,
        clip_fraction: clipped as f64 / n as f64,
    };
    Ok((obj, stats))
}

/// Plain-number evaluation of the surrogate mean, for checks and reports.
pub fn policy_loss(new_logp: &[f64], old_logp: &[f64], adv: &[f64], eps_clip: f64, clip: bool) -> Result<f64> {
    let mut g = Graph::new();
    let new = vector(&mut g, new_logp)?;
    let w = vec![1.0 / new_logp.len() as f64; new_logp.len()];
    let out = policy_surrogate(&mut g, new, old_logp, adv, &w, eps_clip, clip)?;
    g.value(out).item()
}

/// Plain-number evaluation of the mean value loss.
pub fn value_loss_mean(
    v_new: &[f64],
    v_old: &[f64],
    target: &[f64],
    eps_clip: f64,
    clip: bool,
    pessimism: ValueClipPessimism,
) -> Result<f64> {
    let mut g = Graph::new();
    let v = vector(&mut g, v_new)?;
    let w = vec![1.0 / v_new.len() as f64; v_new.len()];
    let out = value_loss(&mut g, v, v_old, target, &w, eps_clip, clip, pessimism)?;
    g.value(out).item()
}
