//! Sample assignment per step, with deferral of chunks from lost ranks.

use crate::allreduce::Planner;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

/// Sample indices one rank trains on in one step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub epoch: u64,
    pub indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trained {
    pub step: u64,
    pub rank: usize,
    pub chunk: Chunk,
}

/// Hands out each epoch's shuffled indices in per-rank shares.
///
/// A step never spans two epochs, and chunks of lost ranks are replayed at
/// the start of the next step, so each epoch trains every index exactly once
/// before the next epoch begins.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkLedger {
    dataset_len: usize,
    /// Samples per step for each rank.
    shares: Vec<usize>,
    max_steps: u64,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
    pub deferred: VecDeque<usize>,
    pub trained: Vec<Trained>,
    pub lost: Vec<(u64, usize, Chunk)>,
}

impl ChunkLedger {
    pub fn new(dataset_len: usize, shares: Vec<usize>, max_steps: u64, seed: u64) -> Self {
        assert!(dataset_len > 0, "empty dataset");
        let mut ledger = ChunkLedger {
            dataset_len,
            shares,
            max_steps,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
            deferred: VecDeque::new(),
            trained: Vec::new(),
            lost: Vec::new(),
        };
        ledger.order = ledger.shuffled(0);
        ledger
    }

    /// Splits a global batch over ranks in proportion to their shares
    /// (placement output), ranks in order.
    pub fn with_batch(dataset_len: usize, ranks: usize, global_batch: usize, max_steps: u64, seed: u64) -> Self {
        let base = global_batch / ranks;
        let shares = (0..ranks).map(|r| base + usize::from(r < global_batch % ranks)).collect();
        Self::new(dataset_len, shares, max_steps, seed)
    }

    fn shuffled(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.dataset_len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn shares(&self) -> &[usize] {
        &self.shares
    }

    pub fn set_shares(&mut self, shares: Vec<usize>) {
        self.shares = shares;
    }

    /// Next step's assignment over `ranks`.
    pub fn assign(&mut self, ranks: &[usize]) -> BTreeMap<usize, Chunk> {
        if self.cursor >= self.dataset_len && self.deferred.is_empty() {
            self.epoch += 1;
            self.order = self.shuffled(self.epoch);
            self.cursor = 0;
        }
        let mut out = BTreeMap::new();
        for r in ranks {
            let want = self.shares.get(*r).copied().unwrap_or(0);
            let mut indices = Vec::with_capacity(want);
            while indices.len() < want {
                if let Some(i) = self.deferred.pop_front() {
                    indices.push(i);
                } else if self.cursor < self.dataset_len {
                    indices.push(self.order[self.cursor]);
                    self.cursor += 1;
                } else {
                    break;
                }
            }
            out.insert(*r, Chunk { epoch: self.epoch, indices });
        }
        out
    }

    /// Checks that epochs run in order, no index repeats within an epoch, and
    /// every finished epoch covered the whole dataset.
    pub fn audit(&self) -> Result<(), String> {
        let mut by_epoch: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        let mut last_epoch = 0;
        for t in &self.trained {
            if t.chunk.epoch < last_epoch {
                return Err(format!("step {} trains epoch {} after epoch {last_epoch}", t.step, t.chunk.epoch));
            }
            last_epoch = t.chunk.epoch;
            by_epoch.entry(t.chunk.epoch).or_default().extend(&t.chunk.indices);
        }
        for (epoch, mut seen) in by_epoch {
            seen.sort_unstable();
            if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
                return Err(format!("epoch {epoch} trains index {} twice", w[0]));
            }
            let finished = epoch < self.epoch || (self.cursor >= self.dataset_len && self.deferred.is_empty());
            if finished && seen.len() != self.dataset_len {
                return Err(format!("epoch {epoch} trained {} of {} indices", seen.len(), self.dataset_len));
            }
        }
        Ok(())
    }

    /// Samples trained per finished epoch.
    pub fn epoch_totals(&self) -> BTreeMap<u64, usize> {
        let mut totals = BTreeMap::new();
        for t in &self.trained {
            *totals.entry(t.chunk.epoch).or_insert(0) += t.chunk.indices.len();
        }
        totals
    }
}

impl Planner for ChunkLedger {
    type Work = Chunk;

    fn plan(&mut self, step: u64, ranks: &[usize]) -> Option<BTreeMap<usize, Chunk>> {
        (step < self.max_steps).then(|| self.assign(ranks))
    }

    fn size(&self, work: &Chunk) -> u64 {
        work.indices.len() as u64
    }

    fn on_lost(&mut self, step: u64, rank: usize, work: &Chunk) {
        self.deferred.extend(&work.indices);
        self.lost.push((step, rank, work.clone()));
    }

    fn on_committed(&mut self, step: u64, work: &BTreeMap<usize, Chunk>) {
        for (rank, chunk) in work {
            self.trained.push(Trained { step, rank: *rank, chunk: chunk.clone() });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn commit(l: &mut ChunkLedger, step: u64, ranks: &[usize], lose: Option<usize>) {
        let mut work = l.plan(step, ranks).unwrap();
        if let Some(r) = lose {
            let w = work.remove(&r).unwrap();
            l.on_lost(step, r, &w);
        }
        l.on_committed(step, &work);
    }

    #[test]
    fn lost_chunk_leads_next_step() {
        let mut l = ChunkLedger::with_batch(40, 4, 8, 100, 1);
        for s in 0..5 {
            commit(&mut l, s, &[0, 1, 2, 3], None);
        }
        let lost = l.plan(5, &[0, 1, 2, 3]).unwrap();
        let chunk2 = lost[&2].clone();
        let mut kept = lost.clone();
        kept.remove(&2);
        l.on_lost(5, 2, &chunk2);
        l.on_committed(5, &kept);
        assert_eq!(l.deferred.len(), 2);
        let next = l.plan(6, &[0, 1, 3]).unwrap();
        assert_eq!(next[&0].indices, chunk2.indices);
        assert!(l.deferred.is_empty());
    }

    #[test]
    fn no_losses_no_deferral() {
        let mut l = ChunkLedger::with_batch(30, 3, 7, 100, 2);
        for s in 0..20 {
            commit(&mut l, s, &[0, 1, 2], None);
            assert!(l.deferred.is_empty());
        }
        l.audit().unwrap();
        assert!(l.epoch_totals().values().take(3).all(|t| *t == 30));
    }

    #[test]
    fn repeated_losses_keep_epochs_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = ChunkLedger::with_batch(50, 4, 12, 1000, 3);
        for s in 0..200 {
            let lose = rand::Rng::random_bool(&mut rng, 0.3).then(|| rand::Rng::random_range(&mut rng, 0..4));
            commit(&mut l, s, &[0, 1, 2, 3], lose);
        }
        l.audit().unwrap();
        let done = l.epoch;
        for (e, t) in l.epoch_totals() {
            if e < done {
                assert_eq!(t, 50);
            }
        }
    }
}
