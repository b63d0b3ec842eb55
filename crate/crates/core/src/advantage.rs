//! Per-agent generalised advantage estimation with the team reward.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::rollout::TrajectoryBatch;

/// Advantages, TD errors and value targets in the batch's sample layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub adv: Vec<f64>,
    pub td_err: Vec<f64>,
    /// `adv + old value`, from the advantages before normalisation.
    pub value_target: Vec<f64>,
}

/// GAE over one agent's window. `terminals[t]` means step `t` ended its
/// episode, so nothing after it is bootstrapped. `bootstrap` is the value of
/// the observation following the window.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    bootstrap: f64,
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = rewards.len();
    if values.len() != h || terminals.len() != h {
        return Err(Error::Shape(format!(
            "gae inputs disagree: {h} rewards, {} values, {} terminals",
            values.len(),
            terminals.len()
        )));
    }
    if rewards.iter().chain(values).any(|v| !v.is_finite()) || !bootstrap.is_finite() {
        return Err(Error::Numerical("gae input contains a non-finite value".into()));
    }
    let mut adv = vec![0.0; h];
    let mut td = vec![0.0; h];
    let mut next_adv = 0.0;
    for t in (0..h).rev() {
        let next_value = if terminals[t] {
            0.0
        } else if t + 1 < h {
            values[t + 1]
        } else {
            bootstrap
        };
        if terminals[t] {
            next_adv = 0.0;
        }
        td[t] = rewards[t] + gamma * next_value - values[t];
        adv[t] = td[t] + gamma * lam * next_adv;
        next_adv = adv[t];
    }
    Ok((adv, td))
}

/// Runs [`gae`] for every (actor, agent) window of the batch.
pub fn compute_gae(batch: &TrajectoryBatch, gamma: f64, lam: f64) -> Result<AdvantageSet> {
    if !(0.0..1.0).contains(&gamma) || !(0.0..=1.0).contains(&lam) {
        return Err(Error::config("algo.gamma/lam", "need 0 <= gamma < 1 and 0 <= lam <= 1"));
    }
    let (n_agents, h) = (batch.n_agents, batch.horizon);
    let n = batch.len();
    let mut set = AdvantageSet { adv: vec![0.0; n], td_err: vec![0.0; n], value_target: vec![0.0; n] };
    for actor in 0..batch.n_actors {
        let rewards = &batch.rewards[actor * h..(actor + 1) * h];
        let terminals = &batch.terminals[actor * h..(actor + 1) * h];
        for agent in 0..n_agents {
            let idx: Vec<usize> = (0..h).map(|t| batch.index(actor, t, agent)).collect();
            let values: Vec<f64> = idx.iter().map(|&i| batch.old_values[i]).collect();
            let boot = batch.bootstrap_values[actor * n_agents + agent];
            let (adv, td) = gae(rewards, &values, terminals, boot, gamma, lam)?;
            for (t, &i) in idx.iter().enumerate() {
                set.adv[i] = adv[t];
                set.td_err[i] = td[t];
                set.value_target[i] = adv[t] + values[t];
            }
        }
    }
    Ok(set)
}

thread_local! {
    static NORMALIZE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// How many times [`normalize_advantages`] has run on this thread.
pub fn normalize_calls() -> u64 {
    NORMALIZE_CALLS.with(Cell::get)
}

/// Mean/std statistics of a slice, with the population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardises in place over the whole slice. With fewer than two values or
/// a zero spread the output is all zeros and a warning is logged.
pub fn normalize_advantages(advs: &mut [f64]) -> Result<()> {
    NORMALIZE_CALLS.with(|c| c.set(c.get() + 1));
    if advs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("advantages contain a non-finite value".into()));
    }
    if advs.len() < 2 {
        log::warn!("advantage normalisation needs at least two samples; zeroing");
        advs.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    let (mean, std) = mean_std(advs);
    if std <= 1e-12 * mean.abs().max(1.0) {
        log::warn!("advantages have zero variance; zeroing");
        advs.iter_mut().for_each(|v| *v = 0.0);
        return Ok(());
    }
    advs.iter_mut().for_each(|v| *v = (*v - mean) / std);
    Ok(())
}
