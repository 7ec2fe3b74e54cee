use super::schedule::{padded_len, plan, total_exchanges, ExchangePlan, Phase};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::ops::Add;

/// A reducible vector element. `Default` must be the additive identity.
pub trait Element: Copy + Debug + PartialEq + Default + Add<Output = Self> + 'static {}

impl Element for i64 {}
impl Element for f64 {}

/// One slot's progress through a collective.
///
/// Exchange `k` completes only when the partner's segment has been applied
/// and the partner has confirmed it applied ours, so the outgoing segment
/// for the current exchange can always be recomputed from `vec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotRun<E> {
    pub slot: usize,
    pub slots: usize,
    /// Unpadded vector length.
    pub len: usize,
    pub vec: Vec<E>,
    /// Next exchange index.
    pub next: usize,
    pub received: bool,
    pub acked: bool,
}

impl<E: Element> SlotRun<E> {
    pub fn new(slot: usize, slots: usize, input: &[E]) -> Self {
        let mut vec = input.to_vec();
        vec.resize(padded_len(input.len(), slots), E::default());
        SlotRun { slot, slots, len: input.len(), vec, next: 0, received: false, acked: false }
    }

    pub fn is_done(&self) -> bool {
        self.next >= total_exchanges(self.slots)
    }

    pub fn plan(&self) -> Option<ExchangePlan> {
        (!self.is_done()).then(|| plan(self.slot, self.slots, self.vec.len(), self.next))
    }

    pub fn outgoing(&self) -> Option<Vec<E>> {
        self.plan().map(|p| self.vec[p.send].to_vec())
    }

    /// Applies the partner's segment for exchange `k`. Returns false when it
    /// is stale, early, duplicated or the wrong size.
    pub fn receive(&mut self, k: usize, segment: &[E]) -> bool {
        if k != self.next || self.received {
            return false;
        }
        let Some(p) = self.plan() else {
            return false;
        };
        if segment.len() != p.receive.len() {
            return false;
        }
        for (i, v) in p.receive.zip(segment) {
            self.vec[i] = match p.phase {
                Phase::ScatterReduce => self.vec[i] + *v,
                Phase::AllGather => *v,
            };
        }
        self.received = true;
        self.advance();
        true
    }

    pub fn ack(&mut self, k: usize) -> bool {
        if k != self.next || self.acked || self.is_done() {
            return false;
        }
        self.acked = true;
        self.advance();
        true
    }

    fn advance(&mut self) {
        if self.received && self.acked {
            self.next += 1;
            self.received = false;
            self.acked = false;
        }
    }

    /// The reduced vector, once every exchange is done.
    pub fn result(&self) -> Option<&[E]> {
        self.is_done().then(|| &self.vec[..self.len])
    }
}
