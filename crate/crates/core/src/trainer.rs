//! Training loop, greedy evaluation, checkpoints and the ablation matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{compute_gae, mean_std, normalize_advantages};
use crate::autodiff::{clip_global_grad_norm, Graph};
use crate::config::AlgoConfig;
use crate::env::{EnvConfig, Environment, StepEvents};
use crate::error::{Error, Result};
use crate::losses::{total_objective, LossStats, Minibatch};
use crate::metrics::CurveSet;
use crate::networks::{trainable, ActorCritic, CriticMode, FrameHistory, ParameterSet};
use crate::optim::Adam;
use crate::rollout::{Featurizer, InputNorm, Rollout, TrajectoryBatch};

pub const PARAMS_FILE: &str = "params.bin";
pub const STATE_FILE: &str = "state.bin";
const EVAL_STREAM: u64 = 0xE7A1;

/// Greedy evaluation summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    /// Fraction of episodes that ended with `won == Some(true)`.
    pub win_rate: f64,
    /// Fraction of episodes with at least one joint stag capture.
    pub stag_rate: f64,
    pub events: StepEvents,
    pub episodes: usize,
}

/// One point of a learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub env_steps: u64,
    pub eval: EvalResult,
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunState {
    pub iteration: u64,
    pub total_env_steps: u64,
    pub params: ParameterSet,
    pub optim: Adam,
    /// Minibatch shuffling.
    pub master_rng: ChaCha8Rng,
    pub rollout: Rollout,
    pub history: Vec<EvalPoint>,
}

/// Diagnostics of one iteration, averaged over its gradient steps.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IterStats {
    pub iteration: u64,
    pub env_steps: u64,
    pub grad_steps: usize,
    pub loss: LossStats,
    pub grad_norm: f64,
    /// Mean return of the episodes that finished during collection.
    pub episode_return: Option<f64>,
    pub adv_mean: f64,
    pub adv_std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    algo: AlgoConfig,
    ac: ActorCritic,
    state: TrainRunState,
}

pub struct Trainer {
    pub algo: AlgoConfig,
    pub env: EnvConfig,
    pub ac: ActorCritic,
    pub state: TrainRunState,
    /// Where to dump a checkpoint when an iteration hits a numerical error.
    pub crash_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(env: EnvConfig, algo: AlgoConfig, seed: u64) -> Result<Self> {
        algo.validate()?;
        env.validate()?;
        let rollout = Rollout::new(
            &env,
            algo.n_actors,
            seed,
            algo.frames,
            algo.agent_id,
            algo.critic_mode,
            algo.norm_input,
        )?;
        let n_actions = env.build()?.spec().n_actions;
        let ac = ActorCritic::new(
            &algo.encoder_config(),
            rollout.feat.policy_frame_dim(),
            rollout.feat.critic_frame_dim(),
            n_actions,
        )?;
        let mut master_rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ac.init_parameters(master_rng.next_u64());
        let optim = Adam::new(&params, algo.lr);
        let state = TrainRunState {
            iteration: 0,
            total_env_steps: 0,
            params,
            optim,
            master_rng,
            rollout,
            history: Vec::new(),
        };
        Ok(Self { algo, env, ac, state, crash_dir: None })
    }

    /// One synchronous cycle: collect, GAE, normalise once, minibatch epochs.
    pub fn train_iteration(&mut self) -> Result<IterStats> {
        let out = self.iteration_inner();
        if let (Err(Error::Numerical(_)), Some(dir)) = (&out, &self.crash_dir) {
            if let Err(e) = self.save_checkpoint(dir) {
                log::error!("could not dump checkpoint after numerical error: {e}");
            } else {
                log::error!("numerical error; checkpoint written to {}", dir.display());
            }
        }
        out
    }

    fn iteration_inner(&mut self) -> Result<IterStats> {
        let cfg = &self.algo;
        let st = &mut self.state;
        let batch = st.rollout.collect(&self.ac, &st.params, cfg.steps_num)?;
        let advs = compute_gae(&batch, cfg.gamma, cfg.lam)?;
        let mut adv = advs.adv.clone();
        normalize_advantages(&mut adv)?;
        let (adv_mean, adv_std) = mean_std(&adv);

        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut sum = LossStats::default();
        let mut grad_norm = 0.0;
        let mut steps = 0;
        for _ in 0..cfg.mini_epochs {
            order.shuffle(&mut st.master_rng);
            for chunk in order.chunks(cfg.mini_batch) {
                let mb = minibatch(&batch, chunk, &adv, &advs.value_target);
                let (stats, norm) = gradient_step(&self.ac, &mut st.params, &mut st.optim, &mb, cfg)?;
                sum.objective += stats.objective;
                sum.policy += stats.policy;
                sum.value += stats.value;
                sum.entropy += stats.entropy;
                sum.clip_fraction += stats.clip_fraction;
                grad_norm += norm;
                steps += 1;
            }
        }
        let k = steps as f64;
        st.iteration += 1;
        st.total_env_steps += (batch.n_actors * batch.horizon) as u64;
        let episode_return = if batch.episodes.is_empty() {
            None
        } else {
            Some(batch.episodes.iter().map(|e| e.ret).sum::<f64>() / batch.episodes.len() as f64)
        };
        Ok(IterStats {
            iteration: st.iteration,
            env_steps: st.total_env_steps,
            grad_steps: steps,
            loss: LossStats {
                objective: sum.objective / k,
                policy: sum.policy / k,
                value: sum.value / k,
                entropy: sum.entropy / k,
                clip_fraction: sum.clip_fraction / k,
            },
            grad_norm: grad_norm / k,
            episode_return,
            adv_mean,
            adv_std,
        })
    }

    /// Greedy evaluation with the current parameters and frozen input
    /// statistics; does not touch the training state.
    pub fn evaluate(&self, n_episodes: usize, seed: u64) -> Result<EvalResult> {
        let r = &self.state.rollout;
        evaluate(&self.ac, &self.state.params, &self.env, &r.feat, &r.norm, n_episodes, seed)
    }

    /// Evaluates and appends the result to the run history.
    pub fn record_eval(&mut self, n_episodes: usize, seed: u64) -> Result<EvalPoint> {
        let eval = self.evaluate(n_episodes, seed)?;
        let point = EvalPoint { iteration: self.state.iteration, env_steps: self.state.total_env_steps, eval };
        self.state.history.push(point);
        Ok(point)
    }

    /// Writes `params.bin` (portable parameter file) and `state.bin` (full
    /// resumable state) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.state.params.save(BufWriter::new(File::create(dir.join(PARAMS_FILE))?))?;
        let snap = Snapshot { algo: self.algo.clone(), ac: self.ac.clone(), state: self.state.clone() };
        bincode::serialize_into(BufWriter::new(File::create(dir.join(STATE_FILE))?), &snap)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(())
    }

    /// Restores a run written by [`Trainer::save_checkpoint`].
    pub fn resume(dir: &Path, env: EnvConfig) -> Result<Self> {
        let file = File::open(dir.join(STATE_FILE))?;
        let snap: Snapshot =
            bincode::deserialize_from(BufReader::new(file)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        snap.ac.check_parameters(&snap.state.params)?;
        Ok(Self { algo: snap.algo, env, ac: snap.ac, state: snap.state, crash_dir: None })
    }
}

fn minibatch(batch: &TrajectoryBatch, idx: &[usize], adv: &[f64], targets: &[f64]) -> Minibatch {
    let mut mb = Minibatch {
        policy_obs: Vec::with_capacity(idx.len() * batch.policy_dim),
        critic_obs: Vec::with_capacity(idx.len() * batch.critic_dim),
        ..Default::default()
    };
    let agents: Vec<usize> = idx.iter().map(|&i| batch.agent_of(i)).collect();
    for &i in idx {
        mb.policy_obs.extend_from_slice(batch.policy_row(i));
        mb.critic_obs.extend_from_slice(batch.critic_row(i));
        mb.actions.push(batch.actions[i]);
        mb.old_logp.push(batch.old_logp[i]);
        mb.old_values.push(batch.old_values[i]);
        mb.value_targets.push(targets[i]);
        mb.adv.push(adv[i]);
    }
    mb.weights = Minibatch::agent_weights(&agents, batch.n_agents);
    mb
}

/// Ascends the objective on one minibatch; returns the loss terms and the
/// pre-clip gradient norm.
pub fn gradient_step(
    ac: &ActorCritic,
    params: &mut ParameterSet,
    optim: &mut Adam,
    mb: &Minibatch,
    cfg: &AlgoConfig,
) -> Result<(LossStats, f64)> {
    let mut g = Graph::new();
    let theta = trainable(&mut g, &params.theta);
    let phi = trainable(&mut g, &params.phi);
    let (obj, stats) = total_objective(&mut g, ac, &theta, &phi, mb, cfg)?;
    let loss = g.scale(obj, -1.0)?;
    g.backward(loss)?;
    for (var, (_, t)) in theta.iter().zip(&mut params.theta).chain(phi.iter().zip(&mut params.phi)) {
        let grad = g.grad(*var).ok_or_else(|| Error::Graph("parameter gradient missing".into()))?;
        t.zero_grad();
        t.accumulate_grad(grad)?;
    }
    let norm = clip_global_grad_norm(params.tensors_mut(), cfg.grad_norm)?;
    optim.lr = cfg.lr;
    optim.step(params)?;
    Ok((stats, norm))
}

/// Runs `n_episodes` greedy episodes in lockstep. Episode `i` starts from the
/// `i`-th reset seed of a stream keyed by `seed`.
pub fn evaluate(
    ac: &ActorCritic,
    params: &ParameterSet,
    env: &EnvConfig,
    feat: &Featurizer,
    norm: &InputNorm,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::config("run.eval_episodes", "must be at least 1"));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    seeds.set_stream(EVAL_STREAM);
    let n_agents = feat.n_agents;
    let pd = feat.policy_frame_dim();
    let mut envs = Vec::with_capacity(n_episodes);
    let mut hists = Vec::with_capacity(n_episodes);
    let mut obs = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut e = env.build()?;
        let tr = e.reset(seeds.next_u64());
        let mut h = vec![FrameHistory::new(feat.frames); n_agents];
        for (a, hist) in h.iter_mut().enumerate() {
            hist.push(feat.policy_frame(norm, &tr.obs[a], a));
        }
        envs.push(e);
        hists.push(h);
        obs.push(tr.obs);
    }
    let mut returns = vec![0.0; n_episodes];
    let mut won = vec![false; n_episodes];
    let mut events = vec![StepEvents::default(); n_episodes];
    let mut live: Vec<usize> = (0..n_episodes).collect();
    while !live.is_empty() {
        let mut input = Vec::with_capacity(live.len() * n_agents * feat.policy_dim());
        for &e in &live {
            for h in &hists[e] {
                input.extend(h.stacked(pd));
            }
        }
        let dists = ac.policy_forward(&params.theta, &input, live.len() * n_agents)?;
        let mut still = Vec::with_capacity(live.len());
        for (k, &e) in live.iter().enumerate() {
            let actions: Vec<usize> = dists[k * n_agents..(k + 1) * n_agents].iter().map(|d| d.argmax()).collect();
            let tr = envs[e].step(&actions)?;
            returns[e] += tr.reward;
            events[e] += tr.events;
            if tr.terminal {
                won[e] = tr.won == Some(true);
                continue;
            }
            for (a, hist) in hists[e].iter_mut().enumerate() {
                hist.push(feat.policy_frame(norm, &tr.obs[a], a));
            }
            obs[e] = tr.obs;
            still.push(e);
        }
        live = still;
    }
    let n = n_episodes as f64;
    let mut total = StepEvents::default();
    events.iter().for_each(|e| total += *e);
    Ok(EvalResult {
        mean_return: returns.iter().sum::<f64>() / n,
        win_rate: won.iter().filter(|&&w| w).count() as f64 / n,
        stag_rate: events.iter().filter(|e| e.stag_catches > 0).count() as f64 / n,
        events: total,
        episodes: n_episodes,
    })
}

/// The clip / critic variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ippo,
    IppoNoValueClip,
    IppoNoPolicyClip,
    Iac,
    IacLowLr,
    MappoCentral,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Ippo,
        Variant::IppoNoValueClip,
        Variant::IppoNoPolicyClip,
        Variant::Iac,
        Variant::IacLowLr,
        Variant::MappoCentral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ippo => "ippo",
            Variant::IppoNoValueClip => "ippo_no_value_clip",
            Variant::IppoNoPolicyClip => "ippo_no_policy_clip",
            Variant::Iac => "iac",
            Variant::IacLowLr => "iac_low_lr",
            Variant::MappoCentral => "mappo_central",
        }
    }

    /// `(policy_clip, value_clip, critic_mode)`.
    pub fn switches(self) -> (bool, bool, CriticMode) {
        match self {
            Variant::Ippo => (true, true, CriticMode::Local),
            Variant::IppoNoValueClip => (true, false, CriticMode::Local),
            Variant::IppoNoPolicyClip => (false, true, CriticMode::Local),
            Variant::Iac | Variant::IacLowLr => (false, false, CriticMode::Local),
            Variant::MappoCentral => (true, true, CriticMode::Centralized),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("run.variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub variant: Variant,
    /// Learning-rate multiplier, used by `iac_low_lr` only.
    pub lr_scale: f64,
}

impl AblationSpec {
    pub fn new(variant: Variant) -> Self {
        Self { variant, lr_scale: 0.1 }
    }

    /// The base config with this variant's switches applied.
    pub fn apply(&self, base: &AlgoConfig) -> AlgoConfig {
        let (policy_clip, value_clip, critic_mode) = self.variant.switches();
        let lr = if self.variant == Variant::IacLowLr { base.lr * self.lr_scale } else { base.lr };
        AlgoConfig { policy_clip, value_clip, critic_mode, lr, ..base.clone() }
    }
}

/// How long to train and how often to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub iterations: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
}

/// Trains to `sched.iterations`, evaluating at iteration 0 (or the resume
/// point), every `eval_every` iterations and at the end. Evaluation episodes
/// are the same at every point of a run.
pub fn run_training(trainer: &mut Trainer, sched: &Schedule, seed: u64) -> Result<Vec<EvalPoint>> {
    let every = sched.eval_every.max(1);
    if trainer.state.history.last().map(|p| p.iteration) != Some(trainer.state.iteration) {
        trainer.record_eval(sched.eval_episodes, seed)?;
    }
    while trainer.state.iteration < sched.iterations {
        let stats = trainer.train_iteration()?;
        log::debug!(
            "iter {} steps {} obj {:.4} value {:.4} entropy {:.4} clip {:.3} return {:?}",
            stats.iteration,
            stats.env_steps,
            stats.loss.objective,
            stats.loss.value,
            stats.loss.entropy,
            stats.loss.clip_fraction,
            stats.episode_return
        );
        let it = trainer.state.iteration;
        if it.is_multiple_of(every) || it == sched.iterations {
            let p = trainer.record_eval(sched.eval_episodes, seed)?;
            log::info!("iter {it} steps {} return {:.3} win {:.3}", p.env_steps, p.eval.mean_return, p.eval.win_rate);
        }
    }
    Ok(trainer.state.history.clone())
}

/// Result of one (variant, seed) run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub algo: AlgoConfig,
    pub outcome: std::result::Result<SeedOutcome, String>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub curve: Vec<EvalPoint>,
    pub params: ParameterSet,
}

#[derive(Debug, Clone)]
pub struct VariantRuns {
    pub spec: AblationSpec,
    pub runs: Vec<SeedRun>,
}

/// Trains every variant on every seed. A failing seed is reported in its
/// `outcome` and does not stop the others.
pub fn run_ablation_suite(
    env: &EnvConfig,
    base: &AlgoConfig,
    variants: &[AblationSpec],
    seeds: &[u64],
    sched: &Schedule,
) -> Result<Vec<VariantRuns>> {
    if seeds.is_empty() {
        return Err(Error::config("run.seeds", "need at least one seed"));
    }
    let jobs: Vec<(usize, u64)> =
        (0..variants.len()).flat_map(|v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<SeedRun> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let algo = variants[v].apply(base);
            let outcome = Trainer::new(env.clone(), algo.clone(), seed)
                .and_then(|mut t| {
                    let curve = run_training(&mut t, sched, seed)?;
                    Ok(SeedOutcome { curve, params: t.state.params })
                })
                .map_err(|e| {
                    log::error!("{} seed {seed} failed: {e}", variants[v].variant.name());
                    e.to_string()
                });
            SeedRun { seed, algo, outcome }
        })
        .collect();
    let mut out: Vec<VariantRuns> = variants.iter().map(|&spec| VariantRuns { spec, runs: Vec::new() }).collect();
    for ((v, _), run) in jobs.into_iter().zip(results) {
        out[v].runs.push(run);
    }
    Ok(out)
}

/// One curve set per variant for `metric`, built from the seeds that
/// finished. Variants whose seeds all failed are left out.
pub fn ablation_curves(runs: &[VariantRuns], metric: &str, pick: fn(&EvalResult) -> f64) -> Vec<CurveSet> {
    runs.iter()
        .filter_map(|v| {
            let ok: Vec<_> = v.runs.iter().filter_map(|r| r.outcome.as_ref().ok().map(|o| (r.seed, o))).collect();
            let first = ok.first()?;
            Some(CurveSet {
                label: v.spec.variant.name().into(),
                metric: metric.into(),
                x: first.1.curve.iter().map(|p| p.env_steps).collect(),
                seeds: ok.iter().map(|(s, _)| *s).collect(),
                y: ok.iter().map(|(_, o)| o.curve.iter().map(|p| pick(&p.eval)).collect()).collect(),
            })
        })
        .collect()
}
