use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Half-cosine from the base rate to zero, no warmup.
    Cosine,
    /// Multiply by `factor` at each milestone reached.
    Step { milestones: Vec<usize>, factor: f64 },
    /// `(base - min_lr) * (1 - t / T)^power + min_lr`.
    Polynomial { power: f64, min_lr: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn cosine(base_lr: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            base_lr,
            total_steps,
        }
    }

    /// Lesion-detection recipe in epochs: 0.02, divided by 10 after epochs 16 and 22 of 24.
    pub fn deeplesion() -> Self {
        Self {
            kind: ScheduleKind::Step {
                milestones: vec![16, 22],
                factor: 0.1,
            },
            base_lr: 0.02,
            total_steps: 24,
        }
    }

    pub fn polynomial(base_lr: f64, total_steps: usize, min_lr: f64) -> Self {
        Self {
            kind: ScheduleKind::Polynomial { power: 0.9, min_lr },
            base_lr,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base learning rate must be positive, got {}", self.base_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        match &self.kind {
            ScheduleKind::Cosine => Ok(()),
            ScheduleKind::Step { factor, .. } if !(*factor > 0.0 && *factor <= 1.0) => {
                Err(Error::Config(format!("step factor must be in (0, 1], got {factor}")))
            }
            ScheduleKind::Step { .. } => Ok(()),
            ScheduleKind::Polynomial { power, min_lr } => {
                if *power <= 0.0 {
                    return Err(Error::Config(format!("polynomial power must be positive, got {power}")));
                }
                if !(*min_lr >= 0.0 && *min_lr < self.base_lr) {
                    return Err(Error::Config(format!(
                        "polynomial min_lr {min_lr} must be in [0, base_lr {})",
                        self.base_lr
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Learning rate at `step` in `[0, total_steps]`.
pub fn lr_at(schedule: &ScheduleSpec, step: usize) -> Result<f64> {
    schedule.validate()?;
    let total = schedule.total_steps;
    if step > total {
        return Err(Error::InvalidRange(format!("step {step} beyond schedule length {total}")));
    }
    let base = schedule.base_lr;
    let t = step as f64 / total as f64;
    Ok(match &schedule.kind {
        ScheduleKind::Cosine => base * 0.5 * (1.0 + (PI * t).cos()),
        ScheduleKind::Step { milestones, factor } => {
            let passed = milestones.iter().filter(|&&m| step >= m).count();
            base * factor.powi(passed as i32)
        }
        ScheduleKind::Polynomial { power, min_lr } => (base - min_lr) * (1.0 - t).powf(*power) + min_lr,
    })
}
