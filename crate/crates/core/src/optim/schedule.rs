use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Linear warmup, one cosine decay to `lr_min` at `decay_epochs`, then
/// cosine restarts of length `restart_len` epochs peaking at `restart_peak`
/// until `total_epochs`. A `restart_len` of 0 holds `lr_min` instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub decay_epochs: f64,
    pub total_epochs: f64,
    pub lr_min: f64,
    pub steps_per_epoch: usize,
    pub restart_peak: f64,
    pub restart_len: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            warmup_epochs: 0.1,
            decay_epochs: 16.0,
            total_epochs: 24.0,
            lr_min: 1e-5,
            steps_per_epoch: 1,
            restart_peak: 0.01,
            restart_len: 4.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_epoch == 0 {
            return Err(param_err!("steps_per_epoch must be positive"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.decay_epochs && self.decay_epochs <= self.total_epochs) {
            return Err(param_err!(
                "schedule needs 0 <= warmup ({}) < decay ({}) <= total ({}) epochs",
                self.warmup_epochs,
                self.decay_epochs,
                self.total_epochs
            ));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.base_lr) {
            return Err(param_err!(
                "schedule needs 0 < lr_min ({}) < base_lr ({})",
                self.lr_min,
                self.base_lr
            ));
        }
        if !(self.restart_peak >= self.lr_min && self.restart_peak <= self.base_lr) {
            return Err(param_err!(
                "restart_peak ({}) must lie in [lr_min, base_lr]",
                self.restart_peak
            ));
        }
        if !(self.restart_len >= 0.0 && self.restart_len.is_finite()) {
            return Err(param_err!("restart_len must be non-negative, got {}", self.restart_len));
        }
        Ok(())
    }

    /// Largest valid step index.
    pub fn total_steps(&self) -> usize {
        (self.total_epochs * self.steps_per_epoch as f64).round() as usize
    }
}

fn cosine(lo: f64, hi: f64, t: f64) -> f64 {
    lo + 0.5 * (hi - lo) * (1.0 + (PI * t).cos())
}

/// Learning rate at global step `step`.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps() {
        return Err(param_err!("step {step} beyond the {} scheduled steps", cfg.total_steps()));
    }
    let spe = cfg.steps_per_epoch as f64;
    let s = step as f64;
    let warm = cfg.warmup_epochs * spe;
    let decay = cfg.decay_epochs * spe;
    if s < warm {
        return Ok(cfg.base_lr * s / warm);
    }
    if s <= decay {
        return Ok(cosine(cfg.lr_min, cfg.base_lr, (s - warm) / (decay - warm)));
    }
    if cfg.restart_len == 0.0 {
        return Ok(cfg.lr_min);
    }
    let pos = (s - decay) / (cfg.restart_len * spe);
    let t = pos - (pos.ceil() - 1.0);
    Ok(cosine(cfg.lr_min, cfg.restart_peak, t))
}
