//! Small cooperative Dec-POMDPs.
//!
//! All environments hand out one team reward per step, fixed-length
//! per-agent observation vectors (zero-padded where an entity is out of
//! sight) and a full state vector for centralised critics.

mod grid_stag_hunt;
mod matrix_game;
mod skirmish;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use grid_stag_hunt::{GridStagHunt, GridStagHuntConfig};
pub use matrix_game::{MatrixGame, MatrixGameConfig, MatrixGameSpec, HARE, STAG};
pub use skirmish::{Skirmish, SkirmishConfig};

/// Static description of a Dec-POMDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

/// Per-step event counters, used by evaluation to tell behaviours apart.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    /// Joint stag captures (the cooperative payoff).
    pub stag_catches: u32,
    pub hare_catches: u32,
    /// Steps where exactly one agent went for the stag.
    pub miscoordinations: u32,
    pub enemies_killed: u32,
    pub allies_lost: u32,
}

impl std::ops::AddAssign for StepEvents {
    fn add_assign(&mut self, o: Self) {
        self.stag_catches += o.stag_catches;
        self.hare_catches += o.hare_catches;
        self.miscoordinations += o.miscoordinations;
        self.enemies_killed += o.enemies_killed;
        self.allies_lost += o.allies_lost;
    }
}

/// Output of `reset` and `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    /// Only set on the terminal step of environments with a win condition.
    pub won: Option<bool>,
    pub events: StepEvents,
}

pub trait Environment {
    fn spec(&self) -> EnvSpec;

    /// Starts a new episode. Equal seeds give equal initial states.
    fn reset(&mut self, seed: u64) -> Transition;

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition>;

    fn full_state(&self) -> Vec<f64>;

    /// Steps taken in the current episode.
    fn steps(&self) -> usize;
}

/// Checks a joint action against the spec and the episode status.
pub(crate) fn validate_step(spec: &EnvSpec, joint_action: &[usize], done: bool) -> Result<()> {
    if done {
        return Err(Error::Env("step called on a finished episode; reset first".into()));
    }
    if joint_action.len() != spec.n_agents {
        return Err(Error::Env(format!(
            "expected {} actions, got {}",
            spec.n_agents,
            joint_action.len()
        )));
    }
    if let Some((agent, a)) = joint_action.iter().enumerate().find(|(_, &a)| a >= spec.n_actions) {
        return Err(Error::Env(format!(
            "agent {agent} chose action {a}, valid range is 0..{}",
            spec.n_actions
        )));
    }
    Ok(())
}

/// Environment selection as it appears in run configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvConfig {
    MatrixGame(MatrixGameConfig),
    GridStagHunt(GridStagHuntConfig),
    Skirmish(SkirmishConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::MatrixGame(MatrixGameConfig::default())
    }
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::MatrixGame(_) => "matrix_game",
            EnvConfig::GridStagHunt(_) => "grid_stag_hunt",
            EnvConfig::Skirmish(_) => "skirmish",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EnvConfig::MatrixGame(c) => c.to_spec().and_then(|s| s.validate()),
            EnvConfig::GridStagHunt(c) => c.validate(),
            EnvConfig::Skirmish(c) => c.validate(),
        }
    }

    pub fn build(&self) -> Result<AnyEnv> {
        Ok(match self {
            EnvConfig::MatrixGame(c) => AnyEnv::Matrix(MatrixGame::new(c.to_spec()?)?),
            EnvConfig::GridStagHunt(c) => AnyEnv::StagHunt(GridStagHunt::new(c.clone())?),
            EnvConfig::Skirmish(c) => AnyEnv::Skirmish(Skirmish::new(c.clone())?),
        })
    }
}

/// Closed set of environments, so workers can be cloned and serialised.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AnyEnv {
    Matrix(MatrixGame),
    StagHunt(GridStagHunt),
    Skirmish(Skirmish),
}

macro_rules! dispatch {
    ($self:ident, $e:ident => $body:expr) => {
        match $self {
            AnyEnv::Matrix($e) => $body,
            AnyEnv::StagHunt($e) => $body,
            AnyEnv::Skirmish($e) => $body,
        }
    };
}

impl Environment for AnyEnv {
    fn spec(&self) -> EnvSpec {
        dispatch!(self, e => e.spec())
    }
    fn reset(&mut self, seed: u64) -> Transition {
        dispatch!(self, e => e.reset(seed))
    }
    fn step(&mut self, joint_action: &[usize]) -> Result<Transition> {
        dispatch!(self, e => e.step(joint_action))
    }
    fn full_state(&self) -> Vec<f64> {
        dispatch!(self, e => e.full_state())
    }
    fn steps(&self) -> usize {
        dispatch!(self, e => e.steps())
    }
}

/// Shortest signed offset from `from` to `to` on a ring of `size` cells.
pub(crate) fn torus_delta(from: i64, to: i64, size: i64) -> i64 {
    let d = (to - from).rem_euclid(size);
    if d > size / 2 {
        d - size
    } else {
        d
    }
}
