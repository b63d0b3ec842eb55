//! Adam optimiser over a [`ParameterSet`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::ParameterSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-5;

/// Adam state: first and second moments per tensor plus the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParameterSet, lr: f64) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, step: 0, v: m.clone(), m }
    }

    /// Descends along the stored gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        if params.tensors().count() != self.m.len() {
            return Err(Error::Shape("optimizer state does not match the parameter set".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for ((t, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = t.grad().ok_or_else(|| Error::Graph("parameter has no gradient".into()))?.to_vec();
            if grad.len() != m.len() {
                return Err(Error::Shape("optimizer state does not match the parameter set".into()));
            }
            for (((p, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
            }
            t.zero_grad();
        }
        if !params.all_finite() {
            return Err(Error::Numerical("parameters became non-finite after an optimizer step".into()));
        }
        Ok(())
    }
}
