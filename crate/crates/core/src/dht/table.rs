use super::id::{Distance, PeerId, ID_BITS};
use crate::sim::NodeId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BUCKET_CAPACITY: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DhtError {
    #[error("self-distance has no bucket")]
    SelfDistance,
    #[error("cannot insert the table owner into its own table")]
    SelfInsert,
}

/// A peer's location as stored in a routing table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub peer_id: PeerId,
    pub address: NodeId,
}

/// Bucket for a distance: position of its first set bit, counted from the MSB.
pub fn bucket_index(distance: Distance) -> Result<usize, DhtError> {
    if distance.is_zero() {
        return Err(DhtError::SelfDistance);
    }
    Ok(distance.leading_zeros() as usize)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Accepted,
    /// Already present; address refreshed.
    Known,
    Replaced { evicted: Contact },
    Rejected,
}

/// Result of the non-probing insert: a full bucket needs a liveness check first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InsertAttempt {
    Done(InsertOutcome),
    BucketFull { bucket: usize },
}

/// Per-peer bucket table. Buckets keep insertion order.
#[derive(Clone, Debug)]
pub struct RoutingTable {
    owner: PeerId,
    capacity: usize,
    buckets: Vec<Vec<Contact>>,
}

impl RoutingTable {
    pub fn new(owner: PeerId) -> Self {
        Self::with_capacity(owner, DEFAULT_BUCKET_CAPACITY)
    }

    pub fn with_capacity(owner: PeerId, capacity: usize) -> Self {
        assert!(capacity >= 1, "bucket capacity must be positive");
        RoutingTable {
            owner,
            capacity,
            buckets: vec![Vec::new(); ID_BITS],
        }
    }

    pub fn owner(&self) -> PeerId {
        self.owner
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn bucket(&self, index: usize) -> &[Contact] {
        &self.buckets[index]
    }

    pub fn bucket_for(&self, peer: PeerId) -> Result<usize, DhtError> {
        bucket_index(self.owner ^ peer)
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    pub fn contacts(&self) -> impl Iterator<Item = &Contact> {
        self.buckets.iter().flatten()
    }

    /// Inserts if there is room. A full bucket is reported so the caller can
    /// probe its occupants and finish with [`RoutingTable::resolve_full`].
    pub fn try_insert(&mut self, contact: Contact) -> Result<InsertAttempt, DhtError> {
        if contact.peer_id == self.owner {
            return Err(DhtError::SelfInsert);
        }
        let index = self.bucket_for(contact.peer_id)?;
        let bucket = &mut self.buckets[index];
        if let Some(existing) = bucket.iter_mut().find(|c| c.peer_id == contact.peer_id) {
            existing.address = contact.address;
            return Ok(InsertAttempt::Done(InsertOutcome::Known));
        }
        if bucket.len() < self.capacity {
            bucket.push(contact);
            return Ok(InsertAttempt::Done(InsertOutcome::Accepted));
        }
        Ok(InsertAttempt::BucketFull { bucket: index })
    }

    /// Completes an insert into a full bucket once occupant liveness is known:
    /// the first occupant (in bucket order) judged dead is replaced.
    pub fn resolve_full(
        &mut self,
        contact: Contact,
        mut is_alive: impl FnMut(&Contact) -> bool,
    ) -> Result<InsertOutcome, DhtError> {
        match self.try_insert(contact)? {
            InsertAttempt::Done(outcome) => Ok(outcome),
            InsertAttempt::BucketFull { bucket } => {
                let slots = &mut self.buckets[bucket];
                match slots.iter().position(|c| !is_alive(c)) {
                    Some(pos) => {
                        let evicted = slots.remove(pos);
                        slots.push(contact);
                        Ok(InsertOutcome::Replaced { evicted })
                    }
                    None => Ok(InsertOutcome::Rejected),
                }
            }
        }
    }

    /// Synchronous insert with an inline liveness probe.
    pub fn insert_with_probe(
        &mut self,
        contact: Contact,
        is_alive: impl FnMut(&Contact) -> bool,
    ) -> Result<InsertOutcome, DhtError> {
        self.resolve_full(contact, is_alive)
    }

    pub fn remove(&mut self, peer: PeerId) -> Option<Contact> {
        let index = self.bucket_for(peer).ok()?;
        let bucket = &mut self.buckets[index];
        let pos = bucket.iter().position(|c| c.peer_id == peer)?;
        Some(bucket.remove(pos))
    }

    /// Stored address of `target`, if known. Never touches the network.
    pub fn lookup(&self, target: PeerId) -> Option<NodeId> {
        let index = self.bucket_for(target).ok()?;
        self.buckets[index]
            .iter()
            .find(|c| c.peer_id == target)
            .map(|c| c.address)
    }

    /// Up to `k` contacts ordered by distance to `target`, ties by peer id.
    pub fn k_closest(&self, target: PeerId, k: usize) -> Vec<Contact> {
        let mut all: Vec<(Distance, Contact)> =
            self.contacts().map(|c| (c.peer_id ^ target, *c)).collect();
        // Distinct ids give distinct distances, so the key alone orders them.
        if k == 0 {
            return Vec::new();
        }
        if all.len() > k {
            all.select_nth_unstable_by_key(k - 1, |e| e.0);
            all.truncate(k);
        }
        all.sort_unstable_by_key(|e| e.0);
        all.into_iter().map(|(_, c)| c).collect()
    }

    /// Checks placement, capacity and uniqueness. Returns the first violation.
    pub fn audit(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        for (i, bucket) in self.buckets.iter().enumerate() {
            if bucket.len() > self.capacity {
                return Err(format!("bucket {i} holds {} > {}", bucket.len(), self.capacity));
            }
            for c in bucket {
                match self.bucket_for(c.peer_id) {
                    Ok(j) if j == i => {}
                    Ok(j) => return Err(format!("{} in bucket {i}, belongs in {j}", c.peer_id)),
                    Err(_) => return Err("owner stored in its own table".into()),
                }
                if !seen.insert(c.peer_id) {
                    return Err(format!("duplicate entry {}", c.peer_id));
                }
            }
        }
        Ok(())
    }
}
