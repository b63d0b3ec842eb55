//! Repeated two-player cooperative matrix games.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{validate_step, EnvSpec, Environment, StepEvents, Transition};

pub const STAG: usize = 0;
pub const HARE: usize = 1;

/// Payoff table indexed `[action of agent 0][action of agent 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixGameSpec {
    pub payoff: Vec<Vec<f64>>,
    pub horizon: usize,
}

impl MatrixGameSpec {
    /// Stag Hunt: `(stag, stag) = 4`, `(stag, hare) = penalty`, hare row = 1.
    pub fn stag_hunt(penalty: f64, horizon: usize) -> Self {
        Self { payoff: vec![vec![4.0, penalty], vec![1.0, 1.0]], horizon }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.payoff.len();
        if n < 2 {
            return Err(Error::config("env.payoff", "need at least two actions"));
        }
        if self.payoff.iter().any(|row| row.len() != n) {
            return Err(Error::config("env.payoff", "payoff matrix must be square"));
        }
        if self.payoff.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::config("env.payoff", "payoff entries must be finite"));
        }
        if self.horizon == 0 {
            return Err(Error::config("env.horizon", "must be at least 1"));
        }
        Ok(())
    }

    /// Best joint payoff in the table.
    pub fn best_payoff(&self) -> f64 {
        self.payoff.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Config-file form: either an explicit `payoff` table or a Stag Hunt penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixGameConfig {
    pub payoff: Option<Vec<Vec<f64>>>,
    pub penalty: f64,
    pub horizon: usize,
}

impl Default for MatrixGameConfig {
    fn default() -> Self {
        Self { payoff: None, penalty: -2.0, horizon: 10 }
    }
}

impl MatrixGameConfig {
    pub fn to_spec(&self) -> Result<MatrixGameSpec> {
        let spec = match &self.payoff {
            Some(p) => MatrixGameSpec { payoff: p.clone(), horizon: self.horizon },
            None => MatrixGameSpec::stag_hunt(self.penalty, self.horizon),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Stateless repeated game; the only observation is a constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixGame {
    spec: MatrixGameSpec,
    t: usize,
    done: bool,
}

impl MatrixGame {
    pub fn new(spec: MatrixGameSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, t: 0, done: false })
    }

    pub fn game(&self) -> &MatrixGameSpec {
        &self.spec
    }

    fn transition(&self, reward: f64, events: StepEvents) -> Transition {
        Transition {
            obs: vec![vec![1.0]; 2],
            state: self.full_state(),
            reward,
            terminal: self.done,
            won: None,
            events,
        }
    }
}

impl Environment for MatrixGame {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: 2,
            n_actions: self.spec.payoff.len(),
            obs_dim: 1,
            state_dim: 1,
            episode_limit: self.spec.horizon,
            gamma: 0.99,
        }
    }

    fn reset(&mut self, _seed: u64) -> Transition {
        self.t = 0;
        self.done = false;
        self.transition(0.0, StepEvents::default())
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition> {
        validate_step(&self.spec(), joint_action, self.done)?;
        let (a, b) = (joint_action[0], joint_action[1]);
        let reward = self.spec.payoff[a][b];
        let mut events = StepEvents::default();
        match (a, b) {
            (STAG, STAG) => events.stag_catches = 1,
            (STAG, _) | (_, STAG) => events.miscoordinations = 1,
            _ => {}
        }
        self.t += 1;
        self.done = self.t >= self.spec.horizon;
        Ok(self.transition(reward, events))
    }

    fn full_state(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn steps(&self) -> usize {
        self.t
    }
}
