//! Synchronous data-parallel SGD over the replicated all-reduce.

use super::compress::{decompress, topk_compress};
use super::ledger::{Chunk, ChunkLedger};
use super::model::{Dataset, Mlp, Params};
use super::optim::{Optimizer, UpdateOutcome};
use super::TrainConfig;
use crate::allreduce::{Collective, CollectiveConfig, RankTask};
use crate::sim::LatencyModel;
use std::collections::BTreeMap;
use std::sync::Arc;

/// One rank's training state. Every replica of the rank holds a copy and
/// applies the same committed updates.
#[derive(Clone, Debug)]
pub struct TrainerRank {
    pub model: Mlp,
    pub data: Arc<Dataset>,
    pub cfg: TrainConfig,
    pub opt: Optimizer,
    /// Error-feedback residual for compression.
    pub residual: Vec<f64>,
    pub ms_per_sample: f64,
    /// `(step, mean loss)` over the contributing samples.
    pub losses: Vec<(u64, f64)>,
    pub outcomes: Vec<UpdateOutcome>,
}

impl TrainerRank {
    pub fn new(model: Mlp, data: Arc<Dataset>, cfg: TrainConfig, init: &Params, ms_per_sample: f64) -> Self {
        let opt = Optimizer::new(init.clone(), &cfg);
        let residual = vec![0.0; init.len()];
        TrainerRank { model, data, cfg, opt, residual, ms_per_sample, losses: Vec::new(), outcomes: Vec::new() }
    }

    /// Scaled gradient sum over `chunk`, flattened, and the summed loss.
    /// A diverged forward pass yields NaNs so every rank sees the failure.
    fn local(&self, chunk: &Chunk) -> (Vec<f64>, f64) {
        let working = self.opt.working(self.cfg.precision);
        match self.model.local_gradients(&working, &self.data, &chunk.indices, self.cfg.precision, self.opt.scale.scale) {
            Ok(g) => (g.grads.flatten(), g.loss),
            Err(_) => (vec![f64::NAN; working.len()], f64::NAN),
        }
    }

    pub fn diverged(&self) -> bool {
        self.outcomes.contains(&UpdateOutcome::Diverged)
    }
}

impl RankTask for TrainerRank {
    type Elem = f64;
    type Work = Chunk;

    fn contribute(&self, _step: u64, chunk: &Chunk) -> Vec<f64> {
        let (mut flat, loss) = self.local(chunk);
        if let Some(k) = self.cfg.compression_k {
            let (sparse, _) = topk_compress(&flat, k.min(flat.len()), &self.residual);
            flat = decompress(&sparse);
        }
        flat.push(loss);
        flat
    }

    fn compute_ms(&self, chunk: &Chunk) -> u64 {
        (chunk.indices.len() as f64 * self.ms_per_sample).ceil() as u64
    }

    fn apply(&mut self, step: u64, chunk: &Chunk, reduced: &[f64], total: u64) {
        if let Some(k) = self.cfg.compression_k {
            // Recompute this rank's contribution to carry its residual forward.
            let (flat, _) = self.local(chunk);
            let (_, residual) = topk_compress(&flat, k.min(flat.len()), &self.residual);
            self.residual = residual;
        }
        let (grads, loss) = reduced.split_at(reduced.len() - 1);
        let grads = self.opt.weights.unflatten_like(grads);
        let outcome = self.opt.update(&grads, total, &self.cfg);
        self.outcomes.push(outcome);
        if total > 0 {
            self.losses.push((step, loss[0] / total as f64));
        }
    }
}

/// Full-batch training on one machine over the given global batches.
pub fn train_single(model: &Mlp, data: &Dataset, cfg: &TrainConfig, init: &Params, batches: &[Vec<usize>]) -> Optimizer {
    let mut opt = Optimizer::new(init.clone(), cfg);
    for batch in batches {
        let working = opt.working(cfg.precision);
        let g = model
            .local_gradients(&working, data, batch, cfg.precision, opt.scale.scale)
            .map(|g| g.grads)
            .unwrap_or_else(|_| working.map(|_| f64::NAN));
        opt.update(&g, batch.len() as u64, cfg);
    }
    opt
}

/// The global batch of each committed step, in step order.
pub fn committed_batches(ledger: &ChunkLedger) -> Vec<Vec<usize>> {
    let mut by_step: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for t in &ledger.trained {
        by_step.entry(t.step).or_default().extend(&t.chunk.indices);
    }
    by_step.into_values().collect()
}

pub type TrainingCollective = Collective<TrainerRank, ChunkLedger>;

/// One rank group per entry of `ms_per_sample`, all starting from `init`.
#[allow(clippy::too_many_arguments)]
pub fn training_collective(
    model: &Mlp,
    data: Arc<Dataset>,
    cfg: &TrainConfig,
    init: &Params,
    ledger: ChunkLedger,
    ms_per_sample: &[f64],
    replicas: usize,
    latency: LatencyModel,
    seed: u64,
) -> TrainingCollective {
    let tasks: Vec<TrainerRank> = ms_per_sample
        .iter()
        .map(|ms| TrainerRank::new(model.clone(), data.clone(), *cfg, init, *ms))
        .collect();
    let coll = CollectiveConfig::for_latency(latency.max_base());
    Collective::build(coll, tasks, replicas, ledger, init.len() + 1, latency, seed)
}
