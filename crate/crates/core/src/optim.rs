//! SGD with momentum and weight decay, plus a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters for one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sgd {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl Sgd {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
    ///
    /// `lr` overrides `self.lr` so a schedule can drive it. Nothing is written
    /// if any gradient is non-finite.
    pub fn step(
        &self,
        lr: f64,
        param: &mut [f64],
        grad: &[f64],
        velocity: &mut Vec<f64>,
    ) -> Result<()> {
        if param.len() != grad.len() {
            return Err(Error::Dimension(format!(
                "sgd: {} params, {} grads",
                param.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("sgd step (gradient entry {i} is {})", grad[i]),
            });
        }
        if velocity.len() != param.len() {
            *velocity = vec![0.0; param.len()];
        }
        for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
        Ok(())
    }
}

/// Multiplies the base rate by `gamma` at each milestone, given as a
/// fraction of the total number of epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    #[serde(default = "default_milestones")]
    pub milestones: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_milestones() -> Vec<f64> {
    vec![0.5, 0.75]
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            milestones: default_milestones(),
            gamma: default_gamma(),
        }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config(
                "schedule milestones must lie in [0, 1]".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "schedule gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, base: f64, epoch: usize, total_epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|m| epoch >= (*m * total_epochs as f64).floor() as usize && **m > 0.0)
            .count();
        base * self.gamma.powi(passed as i32)
    }
}
