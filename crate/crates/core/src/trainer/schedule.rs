use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The rate used from `epoch` onwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: usize,
    pub lr: f64,
}

/// Momentum SGD with a piecewise-constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub milestones: Vec<Milestone>,
    pub epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            base_lr: 1e-2,
            milestones: vec![Milestone { epoch: 60, lr: 1e-3 }, Milestone { epoch: 80, lr: 1e-4 }],
            epochs: 240,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_steps: None,
        }
    }
}

impl TrainSchedule {
    /// A single rate for the whole run.
    pub fn constant(lr: f64, epochs: usize) -> Self {
        Self {
            base_lr: lr,
            milestones: Vec::new(),
            epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        let mut prev = (0, self.base_lr);
        for m in &self.milestones {
            if m.epoch <= prev.0 {
                return Err(Error::Config(format!("milestone epochs must increase from 1, got {}", m.epoch)));
            }
            if !(m.lr >= 0.0 && m.lr <= prev.1) {
                return Err(Error::Config(format!(
                    "milestone at epoch {} raises the rate from {} to {}",
                    m.epoch, prev.1, m.lr
                )));
            }
            prev = (m.epoch, m.lr);
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside the schedule [0, {})",
                self.epochs
            )));
        }
        Ok(self
            .milestones
            .iter()
            .rev()
            .find(|m| epoch >= m.epoch)
            .map_or(self.base_lr, |m| m.lr))
    }
}
