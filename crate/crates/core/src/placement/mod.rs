//! Per-device batch allocation learned with REINFORCE.
//!
//! The environment is a snapshot of device latencies, per-sample compute
//! times and memory capacities. A policy maps it to a probability vector;
//! a Dirichlet sample around that vector is the action, and its
//! capacity-respecting integer rounding is the allocation. Episode latency
//! is the slowest device's compute time plus the all-reduce communication
//! time under the same halving/doubling schedule the collective uses.

pub mod policy;
pub mod reinforce;

pub use policy::{dirichlet_log_density, softmax, Policy};
pub use reinforce::{Action, EpisodeRecord, Reinforce, ReinforceConfig};

use crate::allreduce::schedule::{exchange_phase, partner, total_exchanges};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlacementError {
    #[error("infeasible batch: capacity {capacity} < batch {batch}")]
    InfeasibleBatch { batch: usize, capacity: usize },
    #[error("policy diverged: {0}")]
    PolicyDiverged(String),
    #[error("invalid snapshot: {0}")]
    InvalidSnapshot(String),
}

/// What the policy observes about `k` devices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    /// `k x k` one-way latency in ms.
    pub latency: Vec<Vec<f64>>,
    /// Compute time of one unit batch, per device.
    pub compute_ms: Vec<f64>,
    /// Samples each device can hold.
    pub capacity: Vec<usize>,
    /// Samples per unit batch.
    #[serde(default = "one")]
    pub unit_batch: f64,
}

fn one() -> f64 {
    1.0
}

impl EnvSnapshot {
    pub fn new(latency: Vec<Vec<f64>>, compute_ms: Vec<f64>, capacity: Vec<usize>) -> Result<Self, PlacementError> {
        let s = EnvSnapshot { latency, compute_ms, capacity, unit_batch: 1.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn devices(&self) -> usize {
        self.compute_ms.len()
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        let bad = |m: String| Err(PlacementError::InvalidSnapshot(m));
        let k = self.devices();
        if k == 0 {
            return bad("no devices".into());
        }
        if self.capacity.len() != k || self.latency.len() != k || self.latency.iter().any(|r| r.len() != k) {
            return bad(format!("shapes disagree with {k} devices"));
        }
        for i in 0..k {
            if self.latency[i][i] != 0.0 {
                return bad(format!("latency[{i}][{i}] is not zero"));
            }
            for j in 0..k {
                let l = self.latency[i][j];
                if !(l.is_finite() && l >= 0.0) || l != self.latency[j][i] {
                    return bad(format!("latency[{i}][{j}] must be finite, non-negative and symmetric"));
                }
            }
        }
        if self.compute_ms.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("compute times must be positive".into());
        }
        if self.capacity.contains(&0) {
            return bad("capacities must be at least 1".into());
        }
        if !(self.unit_batch > 0.0) {
            return bad("unit_batch must be positive".into());
        }
        Ok(())
    }

    /// Policy input: latencies, compute times and capacities, each scaled
    /// by its largest entry (capacities by the batch).
    pub fn features(&self, batch: usize) -> Vec<f64> {
        let max_l = self.latency.iter().flatten().copied().fold(0.0, f64::max).max(1e-9);
        let max_v = self.compute_ms.iter().copied().fold(0.0, f64::max);
        let mut f: Vec<f64> = self.latency.iter().flatten().map(|l| l / max_l).collect();
        f.extend(self.compute_ms.iter().map(|v| v / max_v));
        f.extend(self.capacity.iter().map(|s| *s as f64 / batch.max(1) as f64));
        f
    }

    /// Slowest device's compute time plus, for each all-reduce exchange,
    /// the slowest link among pairs of devices that both hold samples.
    pub fn episode_latency(&self, allocation: &[usize]) -> f64 {
        let compute = allocation
            .iter()
            .zip(&self.compute_ms)
            .map(|(d, v)| v * *d as f64 / self.unit_batch)
            .fold(0.0, f64::max);
        compute + self.comm_ms(allocation)
    }

    pub fn comm_ms(&self, allocation: &[usize]) -> f64 {
        let active: Vec<usize> = (0..allocation.len()).filter(|i| allocation[*i] > 0).collect();
        if active.len() < 2 {
            return 0.0;
        }
        let p = active.len().next_power_of_two();
        (0..total_exchanges(p))
            .map(|k| {
                let (phase, step) = exchange_phase(p, k);
                (0..active.len())
                    .filter_map(|s| {
                        let t = partner(s, p, phase, step);
                        (t < active.len()).then(|| self.latency[active[s]][active[t]])
                    })
                    .fold(0.0, f64::max)
            })
            .sum()
    }

    /// Exhaustive search over every feasible allocation of `batch`.
    pub fn brute_force_optimum(&self, batch: usize) -> Result<(Vec<usize>, f64), PlacementError> {
        check_feasible(batch, &self.capacity)?;
        let k = self.devices();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut d = vec![0; k];
        fn walk(s: &EnvSnapshot, i: usize, left: usize, d: &mut Vec<usize>, best: &mut Option<(Vec<usize>, f64)>) {
            if i + 1 == d.len() {
                if left > s.capacity[i] {
                    return;
                }
                d[i] = left;
                let l = s.episode_latency(d);
                if best.as_ref().is_none_or(|(_, b)| l < *b) {
                    *best = Some((d.clone(), l));
                }
                return;
            }
            for x in 0..=left.min(s.capacity[i]) {
                d[i] = x;
                walk(s, i + 1, left - x, d, best);
            }
        }
        walk(self, 0, batch, &mut d, &mut best);
        Ok(best.expect("feasible batch has an allocation"))
    }
}

fn check_feasible(batch: usize, capacity: &[usize]) -> Result<(), PlacementError> {
    let total: usize = capacity.iter().sum();
    if total < batch {
        return Err(PlacementError::InfeasibleBatch { batch, capacity: total });
    }
    Ok(())
}

/// Rounds `batch * weights` to integers summing to `batch` (largest
/// remainder, ties to the lower index), then moves any excess over
/// `capacity` to the uncapped devices with the highest weight.
pub fn project_allocation(weights: &[f64], batch: usize, capacity: &[usize]) -> Result<Vec<usize>, PlacementError> {
    assert_eq!(weights.len(), capacity.len(), "weights and capacities");
    check_feasible(batch, capacity)?;
    let total: f64 = weights.iter().sum();
    let share: Vec<f64> = weights.iter().map(|w| batch as f64 * w / total).collect();
    let mut d: Vec<usize> = share.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|a, b| (share[*b] - share[*b].floor()).total_cmp(&(share[*a] - share[*a].floor())).then(a.cmp(b)));
    let assigned: usize = d.iter().sum();
    for i in order.iter().take(batch.saturating_sub(assigned)) {
        d[*i] += 1;
    }
    let mut excess = 0;
    for (x, cap) in d.iter_mut().zip(capacity) {
        if *x > *cap {
            excess += *x - *cap;
            *x = *cap;
        }
    }
    let mut by_weight: Vec<usize> = (0..d.len()).collect();
    by_weight.sort_by(|a, b| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b)));
    for i in by_weight {
        if excess == 0 {
            break;
        }
        let room = capacity[i] - d[i];
        let moved = room.min(excess);
        d[i] += moved;
        excess -= moved;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(latency: f64, v: [f64; 2]) -> EnvSnapshot {
        EnvSnapshot::new(vec![vec![0.0, latency], vec![latency, 0.0]], v.to_vec(), vec![100, 100]).unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_allocation(&[0.5, 0.5], 10, &[100, 100]).unwrap(), vec![5, 5]);
        assert_eq!(project_allocation(&[0.9, 0.1], 10, &[4, 100]).unwrap(), vec![4, 6]);
        assert!(matches!(project_allocation(&[0.5, 0.5], 10, &[4, 5]), Err(PlacementError::InfeasibleBatch { .. })));
    }

    #[test]
    fn latency_examples() {
        let solo = EnvSnapshot::new(vec![vec![0.0]], vec![2.5], vec![10]).unwrap();
        assert_eq!(solo.episode_latency(&[8]), 20.0);
        let twins = pair(1.0, [1.0, 1.0]);
        // two exchanges of 1 ms each
        assert_eq!(twins.episode_latency(&[5, 5]), 5.0 + 2.0);
        assert!(twins.episode_latency(&[5, 5]) < twins.episode_latency(&[10, 0]));
        assert_eq!(twins.episode_latency(&[10, 0]), 10.0);
    }

    #[test]
    fn snapshot_validation() {
        assert!(EnvSnapshot::new(vec![vec![0.0, 1.0], vec![2.0, 0.0]], vec![1.0, 1.0], vec![1, 1]).is_err());
        assert!(EnvSnapshot::new(vec![vec![0.0]], vec![0.0], vec![1]).is_err());
        assert!(EnvSnapshot::new(vec![vec![0.0]], vec![1.0], vec![0]).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_feasible(
            entries in prop::collection::vec((0.001f64..1.0, 1usize..20), 1..8),
            frac in 0.0f64..=1.0,
        ) {
            let (w, cap): (Vec<f64>, Vec<usize>) = entries.into_iter().unzip();
            let batch = (cap.iter().sum::<usize>() as f64 * frac) as usize;
            let d = project_allocation(&w, batch, &cap).unwrap();
            prop_assert_eq!(d.iter().sum::<usize>(), batch);
            prop_assert!(d.iter().zip(&cap).all(|(x, c)| x <= c));
        }
    }
}
