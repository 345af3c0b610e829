//! SGD with momentum and L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
        }
    }
}

/// Optimizer state: one velocity buffer per parameter, created lazily as zeros.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `v ← μ·v + g + wd·θ`, then `θ ← θ − lr·v`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != grads.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "sgd_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "sgd_step",
                left: vec![self.velocity.len()],
                right: vec![params.len()],
            });
        }
        for ((p, g), v) in params.iter().zip(grads).zip(&self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((theta, &grad), vel) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = momentum * *vel + grad + weight_decay * *theta;
                *theta -= learning_rate * *vel;
            }
        }
        Ok(())
    }
}
