//! Synchronous trajectory collection from `n_actors` environment copies.
//!
//! All workers advance in lockstep. Each step runs one batched forward pass
//! for every (actor, agent) row, then each worker samples its agents' actions
//! from its own RNG stream and steps its own environment. Workers never share
//! state, so stepping them in parallel yields the same batch as stepping them
//! in order.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{AnyEnv, EnvConfig, Environment, StepEvents};
use crate::error::{Error, Result};
use crate::networks::{ActorCritic, Categorical, CriticMode, FrameHistory, ParameterSet};

const ENV_STREAM: u64 = 1 << 32;

/// Draws an action; returns it with its log-probability from `dist`.
pub fn sample_action<R: Rng + ?Sized>(dist: &Categorical, rng: &mut R) -> Result<(usize, f64)> {
    if dist.probs.is_empty() || dist.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numerical(format!("degenerate action distribution {:?}", dist.probs)));
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = Some(i);
        }
        cum += p;
        if u < cum && p > 0.0 {
            return Ok((i, dist.log_probs[i]));
        }
    }
    // rounding can leave the cumulative sum just below one
    let i = last_positive.ok_or_else(|| Error::Numerical("action distribution has no mass".into()))?;
    Ok((i, dist.log_probs[i]))
}

/// Per-feature running mean and variance (parallel Welford update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningNorm {
    pub const CLIP: f64 = 10.0;

    pub fn new(dim: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    /// Folds in `rows`, a row-major `[n, dim]` block.
    pub fn update(&mut self, rows: &[f64]) {
        let dim = self.mean.len();
        if dim == 0 || rows.is_empty() {
            return;
        }
        let n = (rows.len() / dim) as f64;
        for j in 0..dim {
            let col = rows.iter().skip(j).step_by(dim);
            let mean_b = col.clone().sum::<f64>() / n;
            let m2_b = col.map(|x| (x - mean_b) * (x - mean_b)).sum::<f64>();
            let delta = mean_b - self.mean[j];
            let total = self.count + n;
            self.mean[j] += delta * n / total;
            self.m2[j] += m2_b + delta * delta * self.count * n / total;
        }
        self.count += n;
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.count == 0.0 {
            return x.to_vec();
        }
        x.iter()
            .zip(self.mean.iter().zip(&self.m2))
            .map(|(&v, (&m, &m2))| ((v - m) / (m2 / self.count + 1e-8).sqrt()).clamp(-Self::CLIP, Self::CLIP))
            .collect()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> Vec<f64> {
        self.m2.iter().map(|m| if self.count > 0.0 { m / self.count } else { 0.0 }).collect()
    }
}

/// Optional observation and state normalisers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub obs: Option<RunningNorm>,
    pub state: Option<RunningNorm>,
}

impl InputNorm {
    pub fn new(enabled: bool, obs_dim: usize, state_dim: usize) -> Self {
        if enabled {
            Self { obs: Some(RunningNorm::new(obs_dim)), state: Some(RunningNorm::new(state_dim)) }
        } else {
            Self { obs: None, state: None }
        }
    }

    fn obs(&self, x: &[f64]) -> Vec<f64> {
        self.obs.as_ref().map_or_else(|| x.to_vec(), |n| n.apply(x))
    }

    fn state(&self, x: &[f64]) -> Vec<f64> {
        self.state.as_ref().map_or_else(|| x.to_vec(), |n| n.apply(x))
    }
}

/// Turns raw observations into network input frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub frames: usize,
    pub agent_id: bool,
    pub critic_mode: CriticMode,
}

impl Featurizer {
    fn id_len(&self) -> usize {
        if self.agent_id {
            self.n_agents
        } else {
            0
        }
    }

    pub fn policy_frame_dim(&self) -> usize {
        self.obs_dim + self.id_len()
    }

    pub fn critic_frame_dim(&self) -> usize {
        match self.critic_mode {
            CriticMode::Local => self.policy_frame_dim(),
            CriticMode::Centralized => self.state_dim + self.id_len(),
        }
    }

    pub fn policy_dim(&self) -> usize {
        self.frames * self.policy_frame_dim()
    }

    pub fn critic_dim(&self) -> usize {
        self.frames * self.critic_frame_dim()
    }

    fn with_id(&self, mut frame: Vec<f64>, agent: usize) -> Vec<f64> {
        if self.agent_id {
            frame.extend((0..self.n_agents).map(|a| if a == agent { 1.0 } else { 0.0 }));
        }
        frame
    }

    pub fn policy_frame(&self, norm: &InputNorm, obs: &[f64], agent: usize) -> Vec<f64> {
        self.with_id(norm.obs(obs), agent)
    }

    pub fn critic_frame(&self, norm: &InputNorm, obs: &[f64], state: &[f64], agent: usize) -> Vec<f64> {
        match self.critic_mode {
            CriticMode::Local => self.policy_frame(norm, obs, agent),
            CriticMode::Centralized => self.with_id(norm.state(state), agent),
        }
    }
}

/// Summary of one finished episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub ret: f64,
    pub len: usize,
    pub won: Option<bool>,
    pub events: StepEvents,
}

/// One environment with its RNG stream and per-agent frame histories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Worker {
    env: AnyEnv,
    /// Action sampling.
    rng: ChaCha8Rng,
    /// Episode reset seeds, kept apart so every run with the same seed sees
    /// the same sequence of initial states.
    env_rng: ChaCha8Rng,
    obs: Vec<Vec<f64>>,
    state: Vec<f64>,
    policy_hist: Vec<FrameHistory>,
    critic_hist: Vec<FrameHistory>,
    ep_return: f64,
    ep_events: StepEvents,
}

impl Worker {
    fn new(env: AnyEnv, rng: ChaCha8Rng, env_rng: ChaCha8Rng, n_agents: usize, frames: usize) -> Self {
        Self {
            env,
            rng,
            env_rng,
            obs: Vec::new(),
            state: Vec::new(),
            policy_hist: vec![FrameHistory::new(frames); n_agents],
            critic_hist: vec![FrameHistory::new(frames); n_agents],
            ep_return: 0.0,
            ep_events: StepEvents::default(),
        }
    }

    fn start_episode(&mut self) {
        let seed = self.env_rng.next_u64();
        let tr = self.env.reset(seed);
        self.obs = tr.obs;
        self.state = tr.state;
        self.policy_hist.iter_mut().chain(&mut self.critic_hist).for_each(FrameHistory::clear);
        self.ep_return = 0.0;
        self.ep_events = StepEvents::default();
    }

    fn push_frames(&mut self, feat: &Featurizer, norm: &InputNorm) {
        for a in 0..feat.n_agents {
            self.policy_hist[a].push(feat.policy_frame(norm, &self.obs[a], a));
            self.critic_hist[a].push(feat.critic_frame(norm, &self.obs[a], &self.state, a));
        }
    }
}

/// Rollout storage. Per-sample arrays are laid out `[actor][t][agent]`
/// (see [`TrajectoryBatch::index`]); `rewards` and `terminals` are
/// `[actor][t]` because the reward is shared by the team.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub n_actors: usize,
    pub n_agents: usize,
    pub horizon: usize,
    pub policy_dim: usize,
    pub critic_dim: usize,
    pub state_dim: usize,
    pub policy_obs: Vec<f64>,
    pub critic_obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_logp: Vec<f64>,
    pub old_values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    /// `[actor][agent]` value of the observation after the window; 0 when
    /// the window ends on a terminal step.
    pub bootstrap_values: Vec<f64>,
    /// `[actor][t][state_dim]` raw full states.
    pub states: Vec<f64>,
    /// Episodes that finished inside this batch, in actor order.
    pub episodes: Vec<EpisodeStats>,
}

impl TrajectoryBatch {
    pub fn index(&self, actor: usize, t: usize, agent: usize) -> usize {
        (actor * self.horizon + t) * self.n_agents + agent
    }

    /// Number of (actor, t, agent) samples.
    pub fn len(&self) -> usize {
        self.n_actors * self.horizon * self.n_agents
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn agent_of(&self, sample: usize) -> usize {
        sample % self.n_agents
    }

    pub fn policy_row(&self, sample: usize) -> &[f64] {
        &self.policy_obs[sample * self.policy_dim..(sample + 1) * self.policy_dim]
    }

    pub fn critic_row(&self, sample: usize) -> &[f64] {
        &self.critic_obs[sample * self.critic_dim..(sample + 1) * self.critic_dim]
    }

    /// Writes one tab-separated line per sample, after a header line.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "actor\tt\tagent\taction\told_logp\told_value\treward\tterminal")?;
        for actor in 0..self.n_actors {
            for t in 0..self.horizon {
                let step = actor * self.horizon + t;
                for agent in 0..self.n_agents {
                    let i = self.index(actor, t, agent);
                    writeln!(
                        w,
                        "{actor}\t{t}\t{agent}\t{}\t{}\t{}\t{}\t{}",
                        self.actions[i], self.old_logp[i], self.old_values[i], self.rewards[step], self.terminals[step]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// The set of workers plus the input normaliser.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rollout {
    pub feat: Featurizer,
    pub norm: InputNorm,
    workers: Vec<Worker>,
    /// Step workers through rayon.
    pub parallel: bool,
}

impl Rollout {
    /// Worker `i` samples actions from stream `i + 1` of a ChaCha8 generator
    /// keyed by `seed` and draws reset seeds from stream `ENV_STREAM + i`.
    pub fn new(
        env: &EnvConfig,
        n_actors: usize,
        seed: u64,
        frames: usize,
        agent_id: bool,
        critic_mode: CriticMode,
        norm_input: bool,
    ) -> Result<Self> {
        if n_actors == 0 {
            return Err(Error::config("algo.n_actors", "must be at least 1"));
        }
        let proto = env.build()?;
        let spec = proto.spec();
        let feat = Featurizer {
            n_agents: spec.n_agents,
            obs_dim: spec.obs_dim,
            state_dim: spec.state_dim,
            frames,
            agent_id,
            critic_mode,
        };
        let norm = InputNorm::new(norm_input, spec.obs_dim, spec.state_dim);
        let mut workers: Vec<Worker> = (0..n_actors)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
                env_rng.set_stream(ENV_STREAM + i as u64);
                Worker::new(proto.clone(), rng, env_rng, spec.n_agents, frames)
            })
            .collect();
        for w in &mut workers {
            w.start_episode();
            w.push_frames(&feat, &norm);
        }
        Ok(Self { feat, norm, workers, parallel: true })
    }

    pub fn n_actors(&self) -> usize {
        self.workers.len()
    }

    fn stacked_inputs(&self) -> (Vec<f64>, Vec<f64>) {
        let (pd, cd) = (self.feat.policy_frame_dim(), self.feat.critic_frame_dim());
        let mut pi = Vec::with_capacity(self.workers.len() * self.feat.n_agents * self.feat.policy_dim());
        let mut v = Vec::with_capacity(self.workers.len() * self.feat.n_agents * self.feat.critic_dim());
        for w in &self.workers {
            for a in 0..self.feat.n_agents {
                pi.extend(w.policy_hist[a].stacked(pd));
                v.extend(w.critic_hist[a].stacked(cd));
            }
        }
        (pi, v)
    }

    /// Collects `horizon` lockstep steps from every worker with a fixed
    /// parameter snapshot. Episodes carry over between calls. When input
    /// normalisation is on, its statistics are frozen during the call and
    /// updated afterwards from the raw inputs seen.
    pub fn collect(&mut self, ac: &ActorCritic, params: &ParameterSet, horizon: usize) -> Result<TrajectoryBatch> {
        if horizon == 0 {
            return Err(Error::config("algo.steps_num", "must be at least 1"));
        }
        let n_actors = self.workers.len();
        let n_agents = self.feat.n_agents;
        let rows = n_actors * n_agents;
        let (pdim, cdim, sdim) = (self.feat.policy_dim(), self.feat.critic_dim(), self.feat.state_dim);
        let total = rows * horizon;
        let mut b = TrajectoryBatch {
            n_actors,
            n_agents,
            horizon,
            policy_dim: pdim,
            critic_dim: cdim,
            state_dim: sdim,
            policy_obs: vec![0.0; total * pdim],
            critic_obs: vec![0.0; total * cdim],
            actions: vec![0; total],
            old_logp: vec![0.0; total],
            old_values: vec![0.0; total],
            rewards: vec![0.0; n_actors * horizon],
            terminals: vec![false; n_actors * horizon],
            bootstrap_values: vec![0.0; rows],
            states: vec![0.0; n_actors * horizon * sdim],
            episodes: Vec::new(),
        };
        let mut raw_obs: Vec<Vec<f64>> = vec![Vec::new(); n_actors];
        let mut raw_states: Vec<Vec<f64>> = vec![Vec::new(); n_actors];

        for t in 0..horizon {
            let (pi_in, v_in) = self.stacked_inputs();
            let dists = ac.policy_forward(&params.theta, &pi_in, rows)?;
            let values = ac.value_forward(&params.phi, &v_in, rows)?;
            for actor in 0..n_actors {
                let step = actor * horizon + t;
                let w = &self.workers[actor];
                b.states[step * sdim..(step + 1) * sdim].copy_from_slice(&w.state);
                for agent in 0..n_agents {
                    let row = actor * n_agents + agent;
                    let i = b.index(actor, t, agent);
                    b.policy_obs[i * pdim..(i + 1) * pdim].copy_from_slice(&pi_in[row * pdim..(row + 1) * pdim]);
                    b.critic_obs[i * cdim..(i + 1) * cdim].copy_from_slice(&v_in[row * cdim..(row + 1) * cdim]);
                    b.old_values[i] = values[row];
                }
            }

            let feat = &self.feat;
            let norm = &self.norm;
            let step_one = |(actor, w): (usize, &mut Worker)| -> Result<StepOut> {
                let mut actions = Vec::with_capacity(n_agents);
                let mut logps = Vec::with_capacity(n_agents);
                for d in &dists[actor * n_agents..(actor + 1) * n_agents] {
                    let (a, lp) = sample_action(d, &mut w.rng)?;
                    actions.push(a);
                    logps.push(lp);
                }
                let tr = w.env.step(&actions)?;
                if tr.obs.len() != n_agents || tr.obs.iter().any(|o| o.len() != feat.obs_dim) {
                    return Err(Error::Env("observation does not match the environment spec".into()));
                }
                if !tr.reward.is_finite() {
                    return Err(Error::Env("non-finite reward".into()));
                }
                w.ep_return += tr.reward;
                w.ep_events += tr.events;
                let mut out = StepOut {
                    actions,
                    logps,
                    reward: tr.reward,
                    terminal: tr.terminal,
                    episode: None,
                    raw_obs: Vec::new(),
                    raw_state: Vec::new(),
                };
                if tr.terminal {
                    out.episode = Some(EpisodeStats {
                        ret: w.ep_return,
                        len: w.env.steps(),
                        won: tr.won,
                        events: w.ep_events,
                    });
                    w.start_episode();
                } else {
                    w.obs = tr.obs;
                    w.state = tr.state;
                }
                w.push_frames(feat, norm);
                out.raw_obs = w.obs.concat();
                out.raw_state = w.state.clone();
                Ok(out)
            };
            let outs: Vec<Result<StepOut>> = if self.parallel {
                self.workers.par_iter_mut().enumerate().map(step_one).collect()
            } else {
                self.workers.iter_mut().enumerate().map(step_one).collect()
            };
            for (actor, out) in outs.into_iter().enumerate() {
                let out = out?;
                let step = actor * horizon + t;
                b.rewards[step] = out.reward;
                b.terminals[step] = out.terminal;
                for agent in 0..n_agents {
                    let i = b.index(actor, t, agent);
                    b.actions[i] = out.actions[agent];
                    b.old_logp[i] = out.logps[agent];
                }
                b.episodes.extend(out.episode);
                raw_obs[actor].extend(out.raw_obs);
                raw_states[actor].extend(out.raw_state);
            }
        }

        let (_, v_in) = self.stacked_inputs();
        let boot = ac.value_forward(&params.phi, &v_in, rows)?;
        for actor in 0..n_actors {
            let last_terminal = b.terminals[actor * horizon + horizon - 1];
            for agent in 0..n_agents {
                let row = actor * n_agents + agent;
                b.bootstrap_values[row] = if last_terminal { 0.0 } else { boot[row] };
            }
        }

        if let Some(n) = &mut self.norm.obs {
            raw_obs.iter().for_each(|r| n.update(r));
        }
        if let Some(n) = &mut self.norm.state {
            raw_states.iter().for_each(|r| n.update(r));
        }
        Ok(b)
    }
}

struct StepOut {
    actions: Vec<usize>,
    logps: Vec<f64>,
    reward: f64,
    terminal: bool,
    episode: Option<EpisodeStats>,
    raw_obs: Vec<f64>,
    raw_state: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::MatrixGameConfig;

    #[test]
    fn sample_action_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Categorical::from_probs(vec![1.0, 0.0, 0.0]);
        for _ in 0..100 {
            assert_eq!(sample_action(&d, &mut rng).unwrap(), (0, 0.0));
        }
        let d = Categorical::from_probs(vec![0.2, 0.8]);
        loop {
            let (a, lp) = sample_action(&d, &mut rng).unwrap();
            if a == 1 {
                assert_eq!(lp, 0.8f64.ln());
                break;
            }
        }
        let bad = Categorical::from_probs(vec![f64::NAN, 0.5]);
        assert!(sample_action(&bad, &mut rng).is_err());
    }

    #[test]
    fn sample_frequencies_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Categorical::from_probs(vec![0.5, 0.5]);
        let n = 100_000;
        let ones = (0..n).filter(|_| sample_action(&d, &mut rng).unwrap().0 == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn running_norm_matches_batch_statistics() {
        let mut n = RunningNorm::new(2);
        n.update(&[1.0, 10.0, 3.0, 10.0]);
        n.update(&[5.0, 10.0]);
        assert!((n.mean()[0] - 3.0).abs() < 1e-12);
        assert!((n.var()[0] - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(n.var()[1], 0.0);
        let y = n.apply(&[3.0, 10.0]);
        assert!(y[0].abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn featurizer_dims() {
        let f = Featurizer {
            n_agents: 3,
            obs_dim: 5,
            state_dim: 7,
            frames: 2,
            agent_id: true,
            critic_mode: CriticMode::Centralized,
        };
        assert_eq!((f.policy_dim(), f.critic_dim()), (16, 20));
        let norm = InputNorm::new(false, 5, 7);
        let fr = f.critic_frame(&norm, &[0.0; 5], &[1.0; 7], 2);
        assert_eq!(&fr[7..], &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_shape_and_step_count() {
        let env = EnvConfig::MatrixGame(MatrixGameConfig { horizon: 3, ..Default::default() });
        let mut r = Rollout::new(&env, 2, 5, 1, true, CriticMode::Local, true).unwrap();
        let ac = ActorCritic::new(&Default::default(), r.feat.policy_frame_dim(), r.feat.critic_frame_dim(), 2)
            .unwrap();
        let p = ac.init_parameters(0);
        let b = r.collect(&ac, &p, 7).unwrap();
        assert_eq!(b.len(), 2 * 7 * 2);
        assert_eq!(b.rewards.len(), 14);
        // horizon 3 episodes inside a 7-step window: terminals at t = 2, 5
        let term: Vec<usize> = (0..7).filter(|&t| b.terminals[t]).collect();
        assert_eq!(term, vec![2, 5]);
        assert_eq!(b.episodes.len(), 4);
        let mut out = Vec::new();
        b.dump(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1 + b.len());
    }
}
