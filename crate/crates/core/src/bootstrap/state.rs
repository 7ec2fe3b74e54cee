use crate::dht::{Contact, PeerId};
use crate::sim::NodeId;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BootstrapError {
    #[error("dataset exists")]
    DatasetExists,
    #[error("unknown dataset")]
    UnknownDataset,
    #[error("empty title")]
    EmptyTitle,
}

/// Where a dataset's tracker group was last reported to be.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub title: String,
    pub hash: PeerId,
    pub creator: Contact,
    pub leader: NodeId,
    pub incarnation: u32,
    pub term: u64,
    pub members: Vec<NodeId>,
    pub lost: bool,
}

/// A leadership report from a tracker group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderReport {
    pub leader: NodeId,
    pub incarnation: u32,
    pub term: u64,
    pub members: Vec<NodeId>,
}

/// A state change the primary copies to every other bootstrap server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BootUpdate {
    PeerIssued { node: NodeId, peer_id: PeerId },
    DatasetRegistered(DatasetRecord),
    LeaderUpdated { hash: PeerId, report: LeaderReport },
    DatasetLost { hash: PeerId },
}

/// Registry held by each bootstrap server.
#[derive(Clone, Debug)]
pub struct BootstrapState {
    rng: ChaCha8Rng,
    issued: BTreeMap<NodeId, PeerId>,
    issued_ids: BTreeSet<PeerId>,
    dataset_index: BTreeMap<String, PeerId>,
    datasets: BTreeMap<PeerId, DatasetRecord>,
    /// Milliseconds per single-sample step on a bootstrap server.
    reference_ms: f64,
}

impl BootstrapState {
    pub fn new(seed: u64, reference_ms: f64) -> Self {
        assert!(reference_ms > 0.0, "reference step time must be positive");
        BootstrapState {
            rng: ChaCha8Rng::seed_from_u64(seed),
            issued: BTreeMap::new(),
            issued_ids: BTreeSet::new(),
            dataset_index: BTreeMap::new(),
            datasets: BTreeMap::new(),
            reference_ms,
        }
    }

    pub fn reference_ms(&self) -> f64 {
        self.reference_ms
    }

    pub fn peer_id_of(&self, node: NodeId) -> Option<PeerId> {
        self.issued.get(&node).copied()
    }

    pub fn issued(&self) -> &BTreeMap<NodeId, PeerId> {
        &self.issued
    }

    /// Issues a fresh random id, or returns the one this node already holds.
    pub fn register_peer(&mut self, node: NodeId) -> (PeerId, Option<BootUpdate>) {
        if let Some(id) = self.issued.get(&node) {
            return (*id, None);
        }
        let id = loop {
            let candidate = PeerId::random(&mut self.rng);
            if !self.issued_ids.contains(&candidate) {
                break candidate;
            }
        };
        let update = BootUpdate::PeerIssued { node, peer_id: id };
        self.apply(&update);
        (id, Some(update))
    }

    pub fn register_dataset(
        &mut self,
        title: &str,
        hash: PeerId,
        leader: NodeId,
        creator: Contact,
    ) -> Result<BootUpdate, BootstrapError> {
        if title.is_empty() {
            return Err(BootstrapError::EmptyTitle);
        }
        if self.dataset_index.contains_key(title) || self.datasets.contains_key(&hash) {
            return Err(BootstrapError::DatasetExists);
        }
        let update = BootUpdate::DatasetRegistered(DatasetRecord {
            title: title.to_string(),
            hash,
            creator,
            leader,
            incarnation: 1,
            term: 0,
            members: vec![leader],
            lost: false,
        });
        self.apply(&update);
        Ok(update)
    }

    /// Records a leader report. Reports from an older group incarnation, or an
    /// older term of the same incarnation, are ignored (`Ok(None)`).
    pub fn update_tracker_leader(
        &mut self,
        hash: PeerId,
        report: LeaderReport,
    ) -> Result<Option<BootUpdate>, BootstrapError> {
        let rec = self.datasets.get(&hash).ok_or(BootstrapError::UnknownDataset)?;
        if (report.incarnation, report.term) < (rec.incarnation, rec.term) {
            return Ok(None);
        }
        let update = BootUpdate::LeaderUpdated { hash, report };
        self.apply(&update);
        Ok(Some(update))
    }

    pub fn get_tracker_leader(&self, hash: PeerId) -> Result<NodeId, BootstrapError> {
        self.datasets
            .get(&hash)
            .map(|r| r.leader)
            .ok_or(BootstrapError::UnknownDataset)
    }

    pub fn record(&self, hash: PeerId) -> Option<&DatasetRecord> {
        self.datasets.get(&hash)
    }

    pub fn records(&self) -> impl Iterator<Item = &DatasetRecord> {
        self.datasets.values()
    }

    /// (title, hash, leader) for every dataset, ordered by title.
    pub fn list_datasets(&self) -> Vec<(String, PeerId, NodeId)> {
        self.dataset_index
            .iter()
            .map(|(t, h)| (t.clone(), *h, self.datasets[h].leader))
            .collect()
    }

    pub fn mark_lost(&mut self, hash: PeerId) -> Option<BootUpdate> {
        let rec = self.datasets.get(&hash)?;
        if rec.lost {
            return None;
        }
        let update = BootUpdate::DatasetLost { hash };
        self.apply(&update);
        Some(update)
    }

    /// Applies a change made on the primary.
    pub fn apply(&mut self, update: &BootUpdate) {
        match update {
            BootUpdate::PeerIssued { node, peer_id } => {
                self.issued.insert(*node, *peer_id);
                self.issued_ids.insert(*peer_id);
            }
            BootUpdate::DatasetRegistered(rec) => {
                self.dataset_index.insert(rec.title.clone(), rec.hash);
                self.datasets.insert(rec.hash, rec.clone());
            }
            BootUpdate::LeaderUpdated { hash, report } => {
                if let Some(rec) = self.datasets.get_mut(hash) {
                    rec.leader = report.leader;
                    rec.incarnation = report.incarnation;
                    rec.term = report.term;
                    rec.members = report.members.clone();
                    rec.lost = false;
                }
            }
            BootUpdate::DatasetLost { hash } => {
                if let Some(rec) = self.datasets.get_mut(hash) {
                    rec.lost = true;
                }
            }
        }
    }

    /// Compares the replicated parts of two servers' state.
    pub fn same_registry(&self, other: &BootstrapState) -> bool {
        self.issued == other.issued && self.dataset_index == other.dataset_index && self.datasets == other.datasets
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn creator() -> Contact {
        Contact { peer_id: PeerId::from_low_u64(1), address: NodeId(9) }
    }

    #[test]
    fn issuance_is_unique_and_idempotent() {
        let mut s = BootstrapState::new(1, 100.0);
        let (a, up) = s.register_peer(NodeId(5));
        assert!(up.is_some());
        let (again, up) = s.register_peer(NodeId(5));
        assert_eq!(a, again);
        assert!(up.is_none());
        let ids: BTreeSet<PeerId> = (0..500).map(|i| s.register_peer(NodeId(i)).0).collect();
        assert_eq!(ids.len(), 500);
    }

    #[test]
    fn datasets_and_leaders() {
        let mut s = BootstrapState::new(1, 100.0);
        let h = PeerId::sha256(b"cats");
        s.register_dataset("cats", h, NodeId(3), creator()).unwrap();
        assert_eq!(
            s.register_dataset("cats", h, NodeId(4), creator()),
            Err(BootstrapError::DatasetExists)
        );
        assert_eq!(s.register_dataset("", PeerId::sha256(b""), NodeId(4), creator()), Err(BootstrapError::EmptyTitle));
        assert_eq!(s.get_tracker_leader(h), Ok(NodeId(3)));
        let report = |leader, term| LeaderReport { leader: NodeId(leader), incarnation: 1, term, members: vec![] };
        s.update_tracker_leader(h, report(4, 2)).unwrap();
        s.update_tracker_leader(h, report(6, 3)).unwrap();
        assert_eq!(s.get_tracker_leader(h), Ok(NodeId(6)));
        // A delayed report from an older term does not win.
        assert_eq!(s.update_tracker_leader(h, report(4, 2)), Ok(None));
        assert_eq!(s.get_tracker_leader(h), Ok(NodeId(6)));
        assert_eq!(s.list_datasets(), vec![("cats".to_string(), h, NodeId(6))]);
        assert_eq!(
            s.get_tracker_leader(PeerId::sha256(b"dogs")),
            Err(BootstrapError::UnknownDataset)
        );
    }

    #[test]
    fn replicas_converge_by_applying_updates() {
        let mut primary = BootstrapState::new(1, 100.0);
        let mut replica = BootstrapState::new(2, 100.0);
        let mut log = Vec::new();
        log.extend(primary.register_peer(NodeId(1)).1);
        log.push(primary.register_dataset("x", PeerId::sha256(b"x"), NodeId(1), creator()).unwrap());
        for u in &log {
            replica.apply(u);
        }
        assert!(primary.same_registry(&replica));
    }
}
