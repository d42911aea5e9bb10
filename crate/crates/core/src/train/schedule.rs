use serde::{Deserialize, Serialize};

use super::TrainError;

/// Optimizer and schedule settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub eta_min: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl OptimConfig {
    /// Desk-scale preset: a from-scratch tiny model needs a larger peak rate.
    pub fn desk() -> Self {
        Self { peak_lr: 3e-4, ..Self::paper() }
    }

    /// The published schedule: warm up to 1e-5 over 10 of 50 epochs, batch 8.
    pub fn paper() -> Self {
        Self {
            peak_lr: 1e-5,
            warmup_epochs: 10.0,
            total_epochs: 50,
            batch_size: 8,
            weight_decay: 0.05,
            betas: [0.9, 0.999],
            eps: 1e-8,
            eta_min: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            return bad("warmup_epochs must lie in [0, total_epochs)");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 (mixing needs pairs)");
        }
        if !(self.peak_lr >= 0.0 && self.eta_min >= 0.0 && self.eta_min <= self.peak_lr) {
            return bad("need 0 ≤ eta_min ≤ peak_lr");
        }
        if !(self.betas.iter().all(|b| (0.0..1.0).contains(b)) && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("betas must lie in [0, 1), eps > 0, weight_decay ≥ 0");
        }
        Ok(())
    }
}

/// Learning rate at fractional epoch `t ∈ [0, total]`: linear warmup from 0
/// to the peak, then half-cosine decay to `eta_min`.
pub fn lr_at(t: f64, cfg: &OptimConfig) -> Result<f64, TrainError> {
    let total = cfg.total_epochs as f64;
    if !(0.0..=total).contains(&t) {
        return Err(TrainError::Schedule { t, total });
    }
    let w = cfg.warmup_epochs;
    if t < w {
        return Ok(cfg.peak_lr * (t / w));
    }
    let progress = (t - w) / (total - w);
    Ok(cfg.eta_min + 0.5 * (cfg.peak_lr - cfg.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
