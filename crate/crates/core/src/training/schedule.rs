use std::f64::consts::PI;

use super::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Linear,
}

/// Number of warmup steps: `round(warmup_ratio · steps)`, at least one.
pub fn warmup_steps(cfg: &TrainConfig) -> usize {
    ((cfg.warmup_ratio * cfg.steps as f64).round() as usize).clamp(1, cfg.steps.max(1))
}

/// Learning rate at `step` (0 ≤ step ≤ steps): linear warmup from 0 to the
/// peak, then decay to `min_lr_factor · peak` at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.peak_lr;
    let warm = warmup_steps(cfg);
    if step <= warm {
        return peak * step as f64 / warm as f64;
    }
    let floor = cfg.min_lr_factor * peak;
    if cfg.steps <= warm {
        return peak;
    }
    let progress = ((step - warm) as f64 / (cfg.steps - warm) as f64).min(1.0);
    match cfg.schedule {
        Schedule::Cosine => floor + (peak - floor) * 0.5 * (1.0 + (PI * progress).cos()),
        Schedule::Linear => peak - (peak - floor) * progress,
    }
}
