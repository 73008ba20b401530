use serde::{Deserialize, Serialize};

use crate::error::{AmelError, Result};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Running statistics for a batch-normalization layer.
///
/// `running = momentum * running + (1 - momentum) * batch`; the running
/// variance tracks the unbiased batch variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub updates_seen: u64,
    seeded: bool,
}

impl BatchNormState {
    /// Unseeded state: eval-mode use fails until a train-mode update happens.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_BN_MOMENTUM,
            epsilon: DEFAULT_NORM_EPS,
            updates_seen: 0,
            seeded: false,
        }
    }

    /// State with explicit running statistics, usable in eval mode immediately.
    pub fn seeded(running_mean: Vec<f64>, running_var: Vec<f64>) -> Result<Self> {
        if running_mean.len() != running_var.len() {
            return Err(AmelError::InvalidArgument {
                op: "BatchNormState::seeded",
                detail: "mean/var length mismatch".into(),
            });
        }
        if running_var.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(AmelError::InvalidArgument {
                op: "BatchNormState::seeded",
                detail: "running variance must be finite and >= 0".into(),
            });
        }
        Ok(Self {
            running_mean,
            running_var,
            momentum: DEFAULT_BN_MOMENTUM,
            epsilon: DEFAULT_NORM_EPS,
            updates_seen: 0,
            seeded: true,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.seeded || self.updates_seen > 0
    }

    pub(crate) fn mark_seeded(&mut self) {
        self.seeded = true;
    }

    pub(crate) fn update(&mut self, batch_mean: &[f64], batch_var_unbiased: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var_unbiased) {
            *r = (m * *r + (1.0 - m) * b).max(0.0);
        }
        self.updates_seen += 1;
    }
}

/// Whether a batch-norm forward uses batch statistics (and updates the
/// running ones) or reads the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Train,
    Eval,
}
