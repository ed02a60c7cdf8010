use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine learning-rate envelope with an initial linear warmup and
/// zero-and-rewarm events at a list of restart boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct JaggedSchedule {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub init_warmup_steps: usize,
    /// Strictly increasing restart boundaries `T_i`.
    pub restart_steps: Vec<usize>,
    pub restart_warmup_steps: usize,
    pub min_lr_ratio: f64,
}

impl JaggedSchedule {
    /// Plain warmup plus cosine decay, no restarts.
    pub fn cosine(peak_lr: f64, total_steps: usize, init_warmup_steps: usize, min_lr_ratio: f64) -> Self {
        JaggedSchedule {
            peak_lr,
            total_steps,
            init_warmup_steps,
            restart_steps: Vec::new(),
            restart_warmup_steps: 100,
            min_lr_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr >= 0.0) || !self.peak_lr.is_finite() {
            return Err(Error::Config(format!("peak_lr must be finite and non-negative, got {}", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config(format!("min_lr_ratio must lie in [0, 1], got {}", self.min_lr_ratio)));
        }
        if self.init_warmup_steps > self.total_steps {
            return Err(Error::Config("init_warmup_steps exceeds total_steps".into()));
        }
        if !self.restart_steps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("restart steps must be strictly increasing".into()));
        }
        if let Some(&last) = self.restart_steps.last() {
            if last > self.total_steps {
                return Err(Error::Config(format!(
                    "restart step {last} lies beyond total_steps {}",
                    self.total_steps
                )));
            }
            if self.restart_warmup_steps == 0 {
                return Err(Error::Config("restart_warmup_steps must be at least 1 when restarts are scheduled".into()));
            }
        }
        Ok(())
    }

    /// The cosine envelope, decaying from `peak_lr` after the initial warmup
    /// to `min_lr_ratio * peak_lr` at `total_steps`.
    pub fn envelope(&self, step: usize) -> f64 {
        let min_lr = self.peak_lr * self.min_lr_ratio;
        if step <= self.init_warmup_steps {
            return self.peak_lr;
        }
        let span = self.total_steps - self.init_warmup_steps;
        let progress = ((step - self.init_warmup_steps) as f64 / span as f64).min(1.0);
        min_lr + (self.peak_lr - min_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }

    /// Learning rate for `step` in `0..=total_steps`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Index {
                what: "schedule step",
                index: step,
                bound: self.total_steps,
            });
        }
        let restart = self.restart_steps.iter().rev().find(|&&t| t <= step);
        if let Some(&t) = restart {
            let w = self.restart_warmup_steps;
            if step < t + w {
                let target = self.envelope((t + w).min(self.total_steps));
                return Ok(target * (step - t) as f64 / w as f64);
            }
        }
        if step < self.init_warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.init_warmup_steps as f64);
        }
        Ok(self.envelope(step))
    }
}

/// Free-function form of [`JaggedSchedule::lr_at`].
pub fn lr_at(step: usize, sched: &JaggedSchedule) -> Result<f64> {
    sched.lr_at(step)
}
