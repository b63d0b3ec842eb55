//! Small-unit combat on a bounded grid, a desk-sized stand-in for SMAC.
//!
//! Each ally either moves, waits, or attacks one enemy by index, so focusing
//! fire is a learnable skill. Allies act first each step, in index order,
//! then the scripted enemies. An enemy attacks the nearest living ally when
//! it is in range and off cooldown, and otherwise walks towards it. Attacks
//! pick their targets from the units alive at the start of the step and land
//! simultaneously, so a unit killed this step still deals its blow. Attacking
//! sets the unit's cooldown; cooldowns tick down on every step the unit does
//! not attack. The episode is won once every enemy is dead.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{validate_step, EnvSpec, Environment, StepEvents, Transition};

pub const NO_OP: usize = 4;
/// Action `ATTACK + j` attacks enemy `j`.
pub const ATTACK: usize = 5;
const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];
const UNIT_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkirmishConfig {
    pub size: usize,
    pub n_allies: usize,
    pub n_enemies: usize,
    pub health: u32,
    pub attack_range: usize,
    pub cooldown: u32,
    pub sight: usize,
    pub episode_limit: usize,
    pub damage_reward: f64,
    pub kill_reward: f64,
    pub win_reward: f64,
}

impl Default for SkirmishConfig {
    fn default() -> Self {
        Self {
            size: 8,
            n_allies: 3,
            n_enemies: 3,
            health: 3,
            attack_range: 1,
            cooldown: 1,
            sight: 3,
            episode_limit: 40,
            damage_reward: 0.1,
            kill_reward: 0.2,
            win_reward: 1.0,
        }
    }
}

impl SkirmishConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::config("env.size", "grid must be at least 4x4"));
        }
        if self.n_allies == 0 || self.n_enemies == 0 {
            return Err(Error::config("env.n_allies", "both teams need units"));
        }
        if self.n_allies.max(self.n_enemies) > 2 * self.size {
            return Err(Error::config("env.n_allies", "teams do not fit in their start columns"));
        }
        if self.health == 0 {
            return Err(Error::config("env.health", "must be positive"));
        }
        if self.attack_range == 0 {
            return Err(Error::config("env.attack_range", "must be positive"));
        }
        if self.sight == 0 || self.sight >= 2 * (self.size - 1) {
            return Err(Error::config("env.sight", "must be in 1..grid diameter"));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("env.episode_limit", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Unit {
    x: i64,
    y: i64,
    health: u32,
    cooldown: u32,
}

impl Unit {
    fn alive(&self) -> bool {
        self.health > 0
    }

    fn distance(&self, o: &Unit) -> i64 {
        (self.x - o.x).abs() + (self.y - o.y).abs()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Skirmish {
    cfg: SkirmishConfig,
    allies: Vec<Unit>,
    enemies: Vec<Unit>,
    t: usize,
    done: bool,
    won: bool,
}

/// Index of the nearest living unit; ties go to lower health, then index.
fn nearest(from: &Unit, others: &[Unit]) -> Option<usize> {
    others
        .iter()
        .enumerate()
        .filter(|(_, u)| u.alive())
        .min_by_key(|(i, u)| (from.distance(u), u.health, *i))
        .map(|(i, _)| i)
}

impl Skirmish {
    pub fn new(cfg: SkirmishConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env = Self { cfg, allies: Vec::new(), enemies: Vec::new(), t: 0, done: false, won: false };
        env.reset(0);
        Ok(env)
    }

    pub fn config(&self) -> &SkirmishConfig {
        &self.cfg
    }

    fn occupied(&self, x: i64, y: i64) -> bool {
        self.allies.iter().chain(&self.enemies).any(|u| u.alive() && u.x == x && u.y == y)
    }

    fn in_bounds(&self, x: i64, y: i64) -> bool {
        let s = self.cfg.size as i64;
        (0..s).contains(&x) && (0..s).contains(&y)
    }

    fn try_move(&mut self, ally: bool, i: usize, (dx, dy): (i64, i64)) -> bool {
        let u = if ally { self.allies[i] } else { self.enemies[i] };
        let (nx, ny) = (u.x + dx, u.y + dy);
        if !self.in_bounds(nx, ny) || self.occupied(nx, ny) {
            return false;
        }
        let unit = if ally { &mut self.allies[i] } else { &mut self.enemies[i] };
        unit.x = nx;
        unit.y = ny;
        true
    }

    fn observe(&self, agent: usize) -> Vec<f64> {
        let dim = self.spec().obs_dim;
        let me = self.allies[agent];
        if !me.alive() {
            return vec![0.0; dim];
        }
        let scale = (self.cfg.size - 1) as f64;
        let health = self.cfg.health as f64;
        let sight = self.cfg.sight as f64;
        let mut obs = vec![
            me.x as f64 / scale,
            me.y as f64 / scale,
            me.health as f64 / health,
            if me.cooldown > 0 { 1.0 } else { 0.0 },
        ];
        let others = self
            .allies
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != agent)
            .map(|(_, u)| u)
            .chain(&self.enemies);
        for u in others {
            let (dx, dy) = (u.x - me.x, u.y - me.y);
            if u.alive() && dx.abs().max(dy.abs()) <= self.cfg.sight as i64 {
                obs.extend_from_slice(&[1.0, dx as f64 / sight, dy as f64 / sight, u.health as f64 / health]);
            } else {
                obs.extend_from_slice(&[0.0; UNIT_FEATURES]);
            }
        }
        debug_assert_eq!(obs.len(), dim);
        obs
    }

    fn transition(&self, reward: f64, events: StepEvents) -> Transition {
        Transition {
            obs: (0..self.cfg.n_allies).map(|a| self.observe(a)).collect(),
            state: self.full_state(),
            reward,
            terminal: self.done,
            won: self.done.then_some(self.won),
            events,
        }
    }

    /// Deals one point of damage; returns whether the target died.
    fn hit(target: &mut Unit) -> bool {
        target.health = target.health.saturating_sub(1);
        target.health == 0
    }
}

impl Environment for Skirmish {
    fn spec(&self) -> EnvSpec {
        let n = self.cfg.n_allies + self.cfg.n_enemies;
        EnvSpec {
            n_agents: self.cfg.n_allies,
            n_actions: ATTACK + self.cfg.n_enemies,
            obs_dim: UNIT_FEATURES * n,
            state_dim: UNIT_FEATURES * n,
            episode_limit: self.cfg.episode_limit,
            gamma: 0.99,
        }
    }

    fn reset(&mut self, seed: u64) -> Transition {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.cfg.size as i64;
        let health = self.cfg.health;
        let mut place = |cols: [i64; 2], n: usize| -> Vec<Unit> {
            let mut cells: Vec<(i64, i64)> =
                cols.iter().flat_map(|&x| (0..s).map(move |y| (x, y))).collect();
            cells.shuffle(&mut rng);
            cells[..n]
                .iter()
                .map(|&(x, y)| Unit { x, y, health, cooldown: 0 })
                .collect()
        };
        self.allies = place([0, 1], self.cfg.n_allies);
        self.enemies = place([s - 2, s - 1], self.cfg.n_enemies);
        self.t = 0;
        self.done = false;
        self.won = false;
        self.transition(0.0, StepEvents::default())
    }

    fn step(&mut self, joint_action: &[usize]) -> Result<Transition> {
        validate_step(&self.spec(), joint_action, self.done)?;
        let mut reward = 0.0;
        let mut events = StepEvents::default();
        let mut ally_attacked = vec![false; self.allies.len()];
        let mut enemy_attacked = vec![false; self.enemies.len()];

        let mut enemy_hits = vec![0u32; self.enemies.len()];
        let mut ally_hits = vec![0u32; self.allies.len()];
        for (i, &a) in joint_action.iter().enumerate() {
            if !self.allies[i].alive() {
                continue;
            }
            match a {
                NO_OP => {}
                a if a >= ATTACK => {
                    let (me, j) = (self.allies[i], a - ATTACK);
                    let target = self.enemies[j];
                    if me.cooldown == 0 && target.alive() && me.distance(&target) as usize <= self.cfg.attack_range {
                        enemy_hits[j] += 1;
                        self.allies[i].cooldown = self.cfg.cooldown;
                        ally_attacked[i] = true;
                    }
                }
                m => {
                    self.try_move(true, i, MOVES[m]);
                }
            }
        }

        for j in 0..self.enemies.len() {
            let me = self.enemies[j];
            if !me.alive() {
                continue;
            }
            let Some(i) = nearest(&me, &self.allies) else { break };
            let target = self.allies[i];
            if me.distance(&target) as usize <= self.cfg.attack_range {
                if me.cooldown == 0 {
                    ally_hits[i] += 1;
                    self.enemies[j].cooldown = self.cfg.cooldown;
                    enemy_attacked[j] = true;
                }
            } else {
                let (dx, dy) = (target.x - me.x, target.y - me.y);
                let horizontal = (dx.signum(), 0);
                let vertical = (0, dy.signum());
                let (first, second) =
                    if dx.abs() >= dy.abs() { (horizontal, vertical) } else { (vertical, horizontal) };
                if first != (0, 0) && !self.try_move(false, j, first) && second != (0, 0) {
                    self.try_move(false, j, second);
                }
            }
        }

        for (u, &hits) in self.enemies.iter_mut().zip(&enemy_hits) {
            for _ in 0..hits {
                if !u.alive() {
                    break;
                }
                reward += self.cfg.damage_reward;
                if Self::hit(u) {
                    reward += self.cfg.kill_reward;
                    events.enemies_killed += 1;
                }
            }
        }
        for (u, &hits) in self.allies.iter_mut().zip(&ally_hits) {
            for _ in 0..hits {
                if u.alive() && Self::hit(u) {
                    events.allies_lost += 1;
                }
            }
        }

        for (u, attacked) in self.allies.iter_mut().zip(ally_attacked).chain(self.enemies.iter_mut().zip(enemy_attacked)) {
            if !attacked && u.cooldown > 0 {
                u.cooldown -= 1;
            }
        }

        self.t += 1;
        let enemies_dead = self.enemies.iter().all(|u| !u.alive());
        let allies_dead = self.allies.iter().all(|u| !u.alive());
        if enemies_dead {
            reward += self.cfg.win_reward;
            self.won = true;
        }
        self.done = enemies_dead || allies_dead || self.t >= self.cfg.episode_limit;
        Ok(self.transition(reward, events))
    }

    fn full_state(&self) -> Vec<f64> {
        let scale = (self.cfg.size - 1) as f64;
        let health = self.cfg.health as f64;
        let cd = self.cfg.cooldown.max(1) as f64;
        self.allies
            .iter()
            .chain(&self.enemies)
            .flat_map(|u| {
                if u.alive() {
                    [u.x as f64 / scale, u.y as f64 / scale, u.health as f64 / health, u.cooldown as f64 / cd]
                } else {
                    [0.0; UNIT_FEATURES]
                }
            })
            .collect()
    }

    fn steps(&self) -> usize {
        self.t
    }
}
