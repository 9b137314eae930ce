//! Linear warmup followed by cosine annealing.

use std::f64::consts::PI;

use crate::error::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(TensorError::InvalidSchedule(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lr_min <= self.lr_max) || self.lr_min < 0.0 {
            return Err(TensorError::InvalidSchedule(format!(
                "need 0 <= lr_min ({}) <= lr_max ({})",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`. Steps past the end stay at `lr_min`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step >= cfg.total_steps {
        return cfg.lr_min;
    }
    if step < cfg.warmup_steps {
        return cfg.lr_max * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * progress).cos())
}
