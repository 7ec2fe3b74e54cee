//! Choosing the machines a training job runs on.

use crate::coin::vcu;
use crate::dht::{xor_distance, PeerId};
use crate::sim::NodeId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Weights of the three scoring factors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolWeights {
    pub latency: f64,
    pub compute: f64,
    pub closeness: f64,
}

impl Default for PoolWeights {
    fn default() -> Self {
        PoolWeights { latency: 0.5, compute: 0.3, closeness: 0.2 }
    }
}

impl PoolWeights {
    pub fn validate(&self) -> Result<(), String> {
        if [self.latency, self.compute, self.closeness].iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err("pool weights must be non-negative and finite".into())
        }
    }
}

/// A live peer that could join the pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub node: NodeId,
    pub peer_id: PeerId,
    /// Per-sample training time.
    pub step_ms: f64,
    /// Mean one-way latency to the coordinator.
    pub latency_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoolCriteria {
    pub weights: PoolWeights,
    pub min_machines: usize,
    pub max_machines: usize,
    /// Bootstrap server's per-sample time, the VCU reference.
    pub reference_ms: f64,
    /// Steps the job runs; a machine's capacity is its VCU over all of them.
    pub steps: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selected {
    pub candidate: Candidate,
    pub score: f64,
    pub capacity_vcu: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("budget must be positive")]
    NoBudget,
    #[error("{available} live peers, job needs {needed}")]
    InsufficientPeers { available: usize, needed: usize },
}

/// Bits shared from the top between two ids.
fn shared_prefix(a: PeerId, b: PeerId) -> u32 {
    xor_distance(a, b).leading_zeros()
}

/// Scores every candidate, best first; ties go to the lower node.
///
/// Each factor is taken relative to the best candidate: latency as
/// `-latency / max latency`, compute as `-step_ms / fastest step_ms`, and
/// closeness as shared id prefix bits over the largest such count.
pub fn score_candidates(coordinator: PeerId, candidates: &[Candidate], w: &PoolWeights) -> Vec<(f64, Candidate)> {
    let max_latency = candidates.iter().map(|c| c.latency_ms).fold(0.0, f64::max);
    let fastest = candidates.iter().map(|c| c.step_ms).fold(f64::INFINITY, f64::min);
    let max_shared = candidates.iter().map(|c| shared_prefix(coordinator, c.peer_id)).max().unwrap_or(0);
    let mut scored: Vec<(f64, Candidate)> = candidates
        .iter()
        .map(|c| {
            let latency = if max_latency > 0.0 { -c.latency_ms / max_latency } else { 0.0 };
            let compute = -c.step_ms / fastest;
            let closeness =
                if max_shared > 0 { shared_prefix(coordinator, c.peer_id) as f64 / max_shared as f64 } else { 0.0 };
            (w.latency * latency + w.compute * compute + w.closeness * closeness, *c)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.node.cmp(&b.1.node)));
    scored
}

/// Best-scored machines until their combined VCU covers `budget` (one coin
/// buys one VCU), with at least `min_machines` and at most `max_machines`.
pub fn select_machine_pool(
    coordinator: PeerId,
    budget: f64,
    candidates: &[Candidate],
    criteria: &PoolCriteria,
) -> Result<Vec<Selected>, PoolError> {
    if !(budget > 0.0) {
        return Err(PoolError::NoBudget);
    }
    if candidates.len() < criteria.min_machines.max(1) {
        return Err(PoolError::InsufficientPeers { available: candidates.len(), needed: criteria.min_machines.max(1) });
    }
    let mut pool = Vec::new();
    let mut capacity = 0.0;
    for (score, c) in score_candidates(coordinator, candidates, &criteria.weights) {
        if pool.len() >= criteria.max_machines || (capacity >= budget && pool.len() >= criteria.min_machines) {
            break;
        }
        let capacity_vcu = criteria.steps as f64 * vcu(criteria.reference_ms, c.step_ms, 1.0);
        capacity += capacity_vcu;
        pool.push(Selected { candidate: c, score, capacity_vcu });
    }
    Ok(pool)
}
