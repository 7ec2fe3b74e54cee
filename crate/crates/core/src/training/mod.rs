//! Data-parallel synchronous SGD on toy models.
//!
//! Each rank sums gradients over its chunk, the sums are all-reduced, and
//! every rank divides by the total contributing sample count before
//! updating, so all ranks apply the same step. Updates use either a single
//! global learning rate or per-layer LARS rates, optionally in emulated half
//! precision with loss scaling and with top-k compression of the
//! contributions.

pub mod compress;
pub mod ledger;
pub mod model;
pub mod optim;
pub mod precision;
pub mod sync;

pub use compress::{decompress, topk_compress, Sparse};
pub use ledger::{Chunk, ChunkLedger, Trained};
pub use model::{Dataset, GradientSet, Mlp, Params};
pub use optim::{lars_local_lr, Optimizer, UpdateOutcome, UpdateRule};
pub use precision::{round_half, round_single, LossScale, Precision};
pub use sync::{committed_batches, train_single, training_collective, TrainerRank, TrainingCollective};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Optimizer settings shared by every rank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Global learning rate.
    pub lr: f64,
    pub rule: UpdateRule,
    pub precision: Precision,
    pub loss_scale: f64,
    pub dynamic_scale: bool,
    pub compression_k: Option<usize>,
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            rule: UpdateRule::Sgd,
            precision: Precision::F64,
            loss_scale: 1.0,
            dynamic_scale: false,
            compression_k: None,
            warmup_steps: 0,
        }
    }
}

/// A training job: optimizer settings plus batch and step budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingJobConfig {
    pub global_batch: usize,
    pub max_steps: u64,
    /// Ramp the learning rate over the first 5% of steps.
    pub warmup: bool,
    #[serde(flatten)]
    pub optimizer: TrainConfig,
}

impl Default for TrainingJobConfig {
    fn default() -> Self {
        TrainingJobConfig { global_batch: 32, max_steps: 100, warmup: false, optimizer: TrainConfig::default() }
    }
}

impl TrainingJobConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.global_batch == 0 {
            return bad("global_batch must be at least 1");
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            return bad("lr must be positive");
        }
        if let UpdateRule::Lars { trust, weight_decay } = self.optimizer.rule {
            if !(trust > 0.0 && trust < 1.0) {
                return bad("trust coefficient must lie in (0, 1)");
            }
            if weight_decay < 0.0 {
                return bad("weight_decay must be non-negative");
            }
        }
        let s = self.optimizer.loss_scale;
        if !(s >= 1.0 && s.log2().fract() == 0.0) {
            return bad("loss_scale must be a power of two, at least 1");
        }
        if self.optimizer.compression_k == Some(0) {
            return bad("compression_k must be at least 1");
        }
        Ok(())
    }

    /// Optimizer settings with the warmup length resolved.
    pub fn resolved(&self) -> TrainConfig {
        let mut cfg = self.optimizer;
        if self.warmup {
            cfg.warmup_steps = (self.max_steps as f64 * 0.05).ceil() as u64;
        }
        cfg
    }
}
