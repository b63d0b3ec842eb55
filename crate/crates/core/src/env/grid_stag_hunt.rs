//! Two hunters, one stag and a few hares on a small torus.
//!
//! Rules, applied in this order every step:
//!
//! 1. Hunters move (`up`, `down`, `left`, `right`, `stay`), wrapping around.
//! 2. A hare sharing a cell with any hunter is caught (`hare_reward`) and
//!    respawns on a free cell.
//! 3. Hunters within Manhattan distance 1 of the stag are counted. Two of them
//!    catch it (`stag_reward`, stag respawns); exactly one earns `penalty`.
//!    With `stag_flees`, a stag that was approached by a single hunter then
//!    steps to the free neighbouring cell farthest from the hunters.
//! 4. Each prey that did not flee moves to a random free neighbouring cell
//!    with probability `prey_move_prob`.
//!
//! Each hunter sees entities within Manhattan distance `sight`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{torus_delta, validate_step, EnvSpec, Environment, StepEvents, Transition};

const N_HUNTERS: usize = 2;
const MOVES: [(i64, i64); 5] = [(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridStagHuntConfig {
    pub size: usize,
    pub n_hares: usize,
    pub stag_reward: f64,
    pub hare_reward: f64,
    pub penalty: f64,
    pub sight: usize,
    pub episode_limit: usize,
    pub prey_move_prob: f64,
    pub stag_flees: bool,
}

impl Default for GridStagHuntConfig {
    fn default() -> Self {
        Self {
            size: 5,
            n_hares: 2,
            stag_reward: 4.0,
            hare_reward: 1.0,
            penalty: -2.0,
            sight: 2,
            episode_limit: 50,
            prey_move_prob: 0.1,
            stag_flees: true,
        }
    }
}

impl GridStagHuntConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 3 {
            return Err(Error::config("env.size", "grid must be at least 3x3"));
        }
        if N_HUNTERS + 1 + self.n_hares > self.size * self.size {
            return Err(Error::config("env.n_hares", "more entities than cells"));
        }
        // Torus diameter under the Manhattan metric.
        if self.sight == 0 || self.sight >= 2 * (self.size / 2) {
            return Err(Error::config("env.sight", "must be in 1..grid diameter"));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("env.episode_limit", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.prey_move_prob) {
            return Err(Error::config("env.prey_move_prob", "must be a probability"));
        }
        for (k, v) in [("env.stag_reward", self.stag_reward), ("env.hare_reward", self.hare_reward), ("env.penalty", self.penalty)] {
            if !v.is_finite() {
                return Err(Error::config(k, "must be finite"));
            }
        }
        Ok(())
    }
}

type Pos = (i64, i64);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridStagHunt {
    cfg: GridStagHuntConfig,
    hunters: Vec<Pos>,
    stag: Pos,
    hares: Vec<Pos>,
    rng: ChaCha8Rng,
    t: usize,
    done: bool,
}

impl GridStagHunt {
    pub fn new(cfg: GridStagHuntConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = Self {
            hunters: vec![(0, 0); N_HUNTERS],
            stag: (0, 0),
            hares: vec![(0, 0); cfg.n_hares],
            cfg,
            rng: ChaCha8Rng::seed_from_u64(0),
            t: 0,
            done: false,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &GridStagHuntConfig {
        &self.cfg
    }

    fn size(&self) -> i64 {
        self.cfg.size as i64
    }

    fn wrap(&self, (x, y): Pos) -> Pos {
        (x.rem_euclid(self.size()), y.rem_euclid(self.size()))
    }

    fn distance(&self, a: Pos, b: Pos) -> i64 {
        torus_delta(a.0, b.0, self.size()).abs() + torus_delta(a.1, b.1, self.size()).abs()
    }

    fn occupied(&self, p: Pos) -> bool {
        self.hunters.contains(&p) || self.stag == p || self.hares.contains(&p)
    }

    fn free_cell(&mut self) -> Pos {
        loop {
            let p = (
                self.rng.random_range(0..self.size()),
                self.rng.random_range(0..self.size()),
            );
            if !self.occupied(p) {
                return p;
            }
        }
    }

    /// Moves a prey to a random free neighbour, or leaves it in place.
    fn wander(&mut self, from: Pos) -> Pos {
        if self.rng.random::<f64>() >= self.cfg.prey_move_prob {
            return from;
        }
        let (dx, dy) = MOVES[self.rng.random_range(0..4)];
        let to = self.wrap((from.0 + dx, from.1 + dy));
        if self.occupied(to) {
            from
        } else {
            to
        }
    }

    /// Steps the stag to the free neighbour farthest (summed over hunters)
    /// from the hunters; stays put if every neighbour is taken.
    fn flee(&self, from: Pos) -> Pos {
        let mut best = (self.hunters.iter().map(|&h| self.distance(h, from)).sum::<i64>(), from);
        for &(dx, dy) in &MOVES[..4] {
            let to = self.wrap((from.0 + dx, from.1 + dy));
            if self.occupied(to) {
                continue;
            }
            let d = self.hunters.iter().map(|&h| self.distance(h, to)).sum::<i64>();
            if d > best.0 {
                best = (d, to);
            }
        }
        best.1
    }

    /// Entity list seen by everybody: hunters, then stag, then hares.
    fn entities(&self) -> Vec<Pos> {
        let mut v = self.hunters.clone();
        v.push(self.stag);
        v.extend_from_slice(&self.hares);
        v
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let me = self.hunters[agent];
        let scale = (self.cfg.size - 1) as f64;
        let sight = self.cfg.sight as f64;
        let mut obs = vec![me.0 as f64 / scale, me.1 as f64 / scale];
        for (i, p) in self.entities().into_iter().enumerate() {
            if i == agent {
                continue;
            }
            if self.distance(me, p) <= self.cfg.sight as i64 {
                let dx = torus_delta(me.0, p.0, self.size()) as f64;
                let dy = torus_delta(me.1, p.1, self.size()) as f64;
                obs.extend_from_slice(&[1.0, dx / sight, dy / sight]);
            } else {
                obs.extend_from_slice(&[0.0, 0.0, 0.0]);
            }
        }
        obs
    }

    fn transition(&self, reward: f64, events: StepEvents) -> Transition {
        Transition {
            obs: (0..N_HUNTERS).map(|a| self.observe(a)).collect(),
            state: self.full_state(),
            reward,
            terminal: self.done,
            won: None,
            events,
        }
    }
}

impl Environment for GridStagHunt {
    fn spec(&self) -> EnvSpec {
        let others = N_HUNTERS - 1 + 1 + self.cfg.n_hares;
        EnvSpec {
            n_agents: N_HUNTERS,
            n_actions: MOVES.len(),
            obs_dim: 2 + 3 * others,
            state_dim: 2 * (N_HUNTERS + 1 + self.cfg.n_hares),
            episode_limit: self.cfg.episode_limit,
            gamma: 0.99,
        }
    }

    fn reset(&mut self, seed: u64) -> Transition {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        self.done = false;
        // Park everything off-grid, then place one entity at a time.
        let off = (-1, -1);
        self.hunters.iter_mut().for_each(|p| *p = off);
        self.stag = off;
        self.hares.iter_mut().for_each(|p| *p = off);
        for i in 0..N_HUNTERS {
            self.hunters[i] = self.free_cell();
        }
        self.stag = self.free_cell();
        for i in 0..self.hares.len() {
            self.hares[i] = self.free_cell();
        }
        self.transition(0.0, StepEvents::default())
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition> {
        validate_step(&self.spec(), joint_action, self.done)?;
        let mut reward = 0.0;
        let mut events = StepEvents::default();

        for (i, &a) in joint_action.iter().enumerate() {
            let (dx, dy) = MOVES[a];
            let p = self.hunters[i];
            self.hunters[i] = self.wrap((p.0 + dx, p.1 + dy));
        }

        for h in 0..self.hares.len() {
            if self.hunters.contains(&self.hares[h]) {
                reward += self.cfg.hare_reward;
                events.hare_catches += 1;
                self.hares[h] = (-1, -1);
                self.hares[h] = self.free_cell();
            }
        }

        let near_stag = self.hunters.iter().filter(|&&p| self.distance(p, self.stag) <= 1).count();
        if near_stag == N_HUNTERS {
            reward += self.cfg.stag_reward;
            events.stag_catches += 1;
            self.stag = (-1, -1);
            self.stag = self.free_cell();
        } else if near_stag == 1 {
            reward += self.cfg.penalty;
            events.miscoordinations += 1;
        }

        self.stag = if near_stag == 1 && self.cfg.stag_flees { self.flee(self.stag) } else { self.wander(self.stag) };
        for h in 0..self.hares.len() {
            self.hares[h] = self.wander(self.hares[h]);
        }

        self.t += 1;
        self.done = self.t >= self.cfg.episode_limit;
        Ok(self.transition(reward, events))
    }

    fn full_state(&self) -> Vec<f64> {
        let scale = (self.cfg.size - 1) as f64;
        self.entities()
            .into_iter()
            .flat_map(|(x, y)| [x as f64 / scale, y as f64 / scale])
            .collect()
    }

    fn steps(&self) -> usize {
        self.t
    }
}
