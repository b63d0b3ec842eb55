//! Algorithm hyperparameters, named after the columns of the IPPO
//! hyperparameter table where one exists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{CriticMode, EncoderConfig, EncoderKind, HEAD};

/// Which side of the value clip the loss keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueClipPessimism {
    /// `min` of the clipped and unclipped squared errors.
    #[default]
    PaperMin,
    /// `max`, as in most PPO implementations.
    ConventionalMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlgoConfig {
    #[serde(alias = "lambda_critic")]
    pub critic_coef: f64,
    #[serde(alias = "lambda_entropy")]
    pub entropy_coef: f64,
    pub frames: usize,
    pub lr: f64,
    pub mini_epochs: usize,
    pub mini_batch: usize,
    pub norm_input: bool,
    /// Rollout horizon per actor and iteration.
    #[serde(alias = "horizon")]
    pub steps_num: usize,
    #[serde(rename = "type")]
    pub encoder: EncoderKind,
    pub net_arch: Vec<usize>,
    pub conv_strides: [usize; 3],
    pub gamma: f64,
    pub lam: f64,
    pub eps_clip: f64,
    pub grad_norm: f64,
    pub n_actors: usize,
    #[serde(alias = "policy_clip_enabled")]
    pub policy_clip: bool,
    #[serde(alias = "value_clip_enabled")]
    pub value_clip: bool,
    pub value_clip_pessimism: ValueClipPessimism,
    pub critic_mode: CriticMode,
    /// Append a one-hot agent index to every observation frame.
    pub agent_id: bool,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            critic_coef: 1.0,
            entropy_coef: 0.001,
            frames: 1,
            lr: 5e-4,
            mini_epochs: 4,
            mini_batch: 1536,
            norm_input: true,
            steps_num: 128,
            encoder: EncoderKind::Mlp,
            net_arch: HEAD.to_vec(),
            conv_strides: [2, 1, 1],
            gamma: 0.99,
            lam: 0.95,
            eps_clip: 0.2,
            grad_norm: 0.5,
            n_actors: 8,
            policy_clip: true,
            value_clip: true,
            value_clip_pessimism: ValueClipPessimism::PaperMin,
            critic_mode: CriticMode::Local,
            agent_id: true,
        }
    }
}

fn check(ok: bool, key: &str, reason: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(format!("algo.{key}"), reason))
    }
}

impl AlgoConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            kind: self.encoder,
            channels: self.net_arch.clone(),
            frames: self.frames,
            strides: self.conv_strides,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.critic_coef.is_finite() && self.critic_coef >= 0.0, "critic_coef", "must be finite and >= 0")?;
        check(self.entropy_coef.is_finite() && self.entropy_coef >= 0.0, "entropy_coef", "must be finite and >= 0")?;
        check(self.frames >= 1, "frames", "must be at least 1")?;
        check(self.lr.is_finite() && self.lr >= 0.0, "lr", "must be finite and >= 0")?;
        check(self.mini_epochs >= 1, "mini_epochs", "must be at least 1")?;
        check(self.mini_batch >= 1, "mini_batch", "must be at least 1")?;
        check(self.steps_num >= 1, "steps_num", "must be at least 1")?;
        check((0.0..1.0).contains(&self.gamma), "gamma", "must lie in [0, 1)")?;
        check((0.0..=1.0).contains(&self.lam), "lam", "must lie in [0, 1]")?;
        check(self.eps_clip.is_finite() && self.eps_clip > 0.0, "eps_clip", "must be finite and > 0")?;
        check(self.grad_norm.is_finite() && self.grad_norm > 0.0, "grad_norm", "must be finite and > 0")?;
        check(self.n_actors >= 1, "n_actors", "must be at least 1")?;
        self.encoder_config().validate()
    }
}
