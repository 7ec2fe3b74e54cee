//! Weight updates: plain SGD on the averaged gradient, or layer-wise
//! adaptive rates (LARS).

use super::model::Params;
use super::precision::{LossScale, Precision};
use super::TrainConfig;
use serde::{Deserialize, Serialize};

/// Denominators at or below this make the local rate zero.
pub const LARS_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    Sgd,
    Lars { trust: f64, weight_decay: f64 },
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `trust * |w| / (|g| + weight_decay * |w|)`, or 0 when that denominator
/// vanishes.
pub fn lars_local_lr(weights: &[f64], grad: &[f64], trust: f64, weight_decay: f64) -> f64 {
    let w = l2_norm(weights);
    let denom = l2_norm(grad) + weight_decay * w;
    if denom <= LARS_EPSILON {
        0.0
    } else {
        trust * w / denom
    }
}

/// Learning rate at `step`, ramped linearly over the warmup steps.
pub fn scheduled_lr(lr: f64, warmup_steps: u64, step: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        lr
    } else {
        lr * (step + 1) as f64 / warmup_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// Scaled gradients overflowed; weights untouched.
    SkippedOverflow,
    /// Non-finite values outside loss scaling.
    Diverged,
}

/// Master weights plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub weights: Params,
    pub scale: LossScale,
    /// Updates attempted so far, applied or skipped.
    pub step: u64,
}

impl Optimizer {
    pub fn new(weights: Params, cfg: &TrainConfig) -> Self {
        let weights = weights.map(|v| cfg.precision.round_master(v));
        let scale = if cfg.dynamic_scale { LossScale::dynamic(cfg.loss_scale) } else { LossScale::fixed(cfg.loss_scale) };
        Optimizer { weights, scale, step: 0 }
    }

    /// Weights the forward and backward passes see.
    pub fn working(&self, prec: Precision) -> Params {
        self.weights.map(|v| prec.round(v))
    }

    /// Applies `scaled_sum`, the gradient of `scale * loss` summed over `n`
    /// examples.
    pub fn update(&mut self, scaled_sum: &Params, n: u64, cfg: &TrainConfig) -> UpdateOutcome {
        let step = self.step;
        let scale = self.scale.scale;
        self.step += 1;
        if !scaled_sum.is_finite() {
            if cfg.precision == Precision::Half {
                self.scale.observe(true);
                return UpdateOutcome::SkippedOverflow;
            }
            return UpdateOutcome::Diverged;
        }
        self.scale.observe(false);
        if n == 0 {
            return UpdateOutcome::Applied;
        }
        let prec = cfg.precision;
        let lr = scheduled_lr(cfg.lr, cfg.warmup_steps, step);
        let mut next = self.weights.clone();
        for (l, (w, g)) in next.layers.iter_mut().zip(&scaled_sum.layers).enumerate() {
            let mean: Vec<f64> = g.iter().map(|v| prec.round_master(prec.round_master(v / scale) / n as f64)).collect();
            let rate = match cfg.rule {
                UpdateRule::Sgd => lr,
                UpdateRule::Lars { trust, weight_decay } => {
                    lr * lars_local_lr(&self.weights.layers[l], &mean, trust, weight_decay)
                }
            };
            for (wi, gi) in w.iter_mut().zip(&mean) {
                *wi = prec.round_master(*wi - rate * gi);
            }
        }
        if !next.is_finite() {
            return UpdateOutcome::Diverged;
        }
        self.weights = next;
        UpdateOutcome::Applied
    }
}
