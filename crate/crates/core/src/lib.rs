//! Independent PPO (IPPO) for cooperative multi-agent reinforcement learning.

pub mod advantage;
pub mod autodiff;
pub mod config;
pub mod env;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};
