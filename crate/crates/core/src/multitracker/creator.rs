use crate::dht::PeerId;
use crate::network::{BootAnswer, BootCall, BootPurpose, CallPurpose, NetMsg, NetTimer, PeerNode, TrackerCall};
use crate::registry::{DatasetMeta, OpReport, PlaceOp};
use crate::sim::{Env, SimTime};

/// A creator's copy of its dataset's metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct CreatorSnapshot {
    pub hash: PeerId,
    pub meta: DatasetMeta,
    pub taken_at: SimTime,
}

/// What a dataset's creator keeps to detect total tracker loss and reboot.
/// Held in memory only, so a crashed creator can no longer reboot.
#[derive(Clone, Debug)]
pub struct CreatorWatch {
    pub title: String,
    pub hash: PeerId,
    /// Newest group incarnation this creator knows about.
    pub incarnation: u32,
    pub snapshot: Option<CreatorSnapshot>,
    pub(crate) rebooting: bool,
}

impl CreatorWatch {
    pub fn new(title: &str, hash: PeerId, incarnation: u32, snapshot: CreatorSnapshot) -> Self {
        CreatorWatch { title: title.to_string(), hash, incarnation, snapshot: Some(snapshot), rebooting: false }
    }
}

impl PeerNode {
    pub(crate) fn on_snapshot_push<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, meta: DatasetMeta, taken_at: u64) {
        let hash = meta.hash;
        let Some(w) = self.watches.get_mut(&hash) else {
            return;
        };
        if w.snapshot.as_ref().is_none_or(|s| s.meta.version <= meta.version) {
            w.snapshot = Some(CreatorSnapshot { hash, meta, taken_at: SimTime(taken_at) });
            env.metric("snapshot_stored", 1.0);
        }
    }

    pub(crate) fn store_snapshot<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId, meta: DatasetMeta) {
        let taken_at = env.now().0;
        if meta.hash == hash {
            self.on_snapshot_push(env, meta, taken_at);
        }
    }

    pub(crate) fn on_snapshot_poll<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId) {
        if !self.watches.contains_key(&hash) {
            return;
        }
        env.set_timer(self.params.snapshot_period_ms, NetTimer::SnapshotPoll { hash });
        self.leader_call(env, hash, TrackerCall::GetPeers, CallPurpose::SnapshotRefresh(hash));
    }

    pub(crate) fn on_creator_poll<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId) {
        let Some(w) = self.watches.get(&hash) else {
            return;
        };
        env.set_timer(self.params.creator_poll_ms, NetTimer::CreatorPoll { hash });
        if !w.rebooting {
            self.boot_call(env, BootCall::LivenessPoll { hash }, BootPurpose::CreatorLiveness(hash));
        }
    }

    pub(crate) fn on_liveness<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId, answer: BootAnswer) {
        let BootAnswer::Liveness { live, incarnation } = answer else {
            return;
        };
        let Some(w) = self.watches.get_mut(&hash) else {
            return;
        };
        w.incarnation = w.incarnation.max(incarnation);
        if !live.is_empty() || w.rebooting {
            return;
        }
        let op = self.next_id;
        self.next_id += 1;
        let Some(snapshot) = w.snapshot.clone() else {
            env.metric("dataset_unrecoverable", 1.0);
            let report = OpReport::Failed { what: "reboot".into(), reason: "snapshot missing".into() };
            self.reports.push((op, report));
            return;
        };
        w.rebooting = true;
        let incarnation = w.incarnation + 1;
        env.metric("tracker_reboot_started", incarnation as f64);
        let place = PlaceOp { meta: snapshot.meta, incarnation, reboot: true, candidates: Vec::new(), next: 0 };
        self.start_place(env, op, place);
    }
}
