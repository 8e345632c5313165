//! Linear warmup followed by cosine decay to a floor.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub floor_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup_fraction: 0.03,
            floor_lr: 0.0,
        }
    }
}

impl ScheduleConfig {
    /// `ceil(warmup_fraction · total)`, ignoring representation error in the product.
    pub fn warmup_steps(&self, total: usize) -> usize {
        let w = self.warmup_fraction * total as f64;
        let r = w.round();
        if (w - r).abs() < 1e-9 { r as usize } else { w.ceil() as usize }
    }

    /// Rate at `step` of `total`: `peak · step / warmup` during warmup, then
    /// `floor + (peak − floor) · (1 + cos(π · progress)) / 2`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = self.warmup_steps(total).min(total);
        if step < warmup {
            return self.peak_lr * step as f64 / warmup as f64;
        }
        if total == warmup {
            return self.peak_lr;
        }
        let progress = (step.min(total) - warmup) as f64 / (total - warmup) as f64;
        self.floor_lr + (self.peak_lr - self.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
