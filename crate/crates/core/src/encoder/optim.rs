use serde::{Deserialize, Serialize};

use super::{GradVector, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::Vec64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Stochastic gradient descent with heavy-ball momentum.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Iterations at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

/// Adam by default: plain SGD diverges once the consistency gradient into
/// the memory network grows with the confidence gap between the networks.
impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::adam(),
            lr: 0.003,
            milestones: vec![1000],
            gamma: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("decay factor {} outside (0, 1]", self.gamma)));
        }
        Ok(())
    }

    /// Learning rate in effect at iteration `iter` (0-based).
    pub fn lr_at(&self, iter: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= iter).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// Optimizer buffers for one network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec64,
    second: Vec64,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        let second = match config.kind {
            OptimizerKind::Adam { .. } => vec![0.0; param_count],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            first: vec![0.0; param_count],
            second,
            steps: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update and returns the new parameters together with the
    /// exact delta, so that `new = old + delta` holds bitwise.
    pub fn step(
        &mut self,
        params: &ModelParams,
        grad: &GradVector,
        iter: usize,
    ) -> Result<(ModelParams, Vec64)> {
        if grad.shape() != params.shape() || self.first.len() != params.len() {
            return Err(Error::invalid("optimizer step with mismatched layouts"));
        }
        let lr = self.config.lr_at(iter);
        self.steps += 1;
        let g = grad.values();
        let delta: Vec64 = match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                if momentum == 0.0 {
                    g.iter().map(|&gi| -lr * gi).collect()
                } else {
                    let first_step = self.steps == 1;
                    self.first
                        .iter_mut()
                        .zip(g)
                        .map(|(buf, &gi)| {
                            *buf = if first_step { gi } else { momentum * *buf + gi };
                            -lr * *buf
                        })
                        .collect()
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                self.first
                    .iter_mut()
                    .zip(self.second.iter_mut())
                    .zip(g)
                    .map(|((m, v), &gi)| {
                        *m = beta1 * *m + (1.0 - beta1) * gi;
                        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                        -lr * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        };
        let updated = params.add_delta(&delta)?;
        Ok((updated, delta))
    }
}
