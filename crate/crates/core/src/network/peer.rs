use super::wire::{BootAnswer, BootCall, NetMsg, NetTimer, ReqId, TrackerAnswer, TrackerCall};
use super::{dht_env, NetParams};
use crate::dht::{Contact, DhtNode, PeerId};
use crate::multitracker::{CreatorWatch, TrackerReplica};
use crate::registry::{DatasetMeta, Op, OpReport};
use crate::sim::{Env, NodeId};
use rand::Rng;
use std::collections::BTreeMap;

/// Static characteristics of a peer machine.
#[derive(Clone, Debug)]
pub struct PeerProfile {
    /// Milliseconds to train one sample.
    pub step_ms: f64,
    /// Training-job coordinators never host trackers.
    pub coordinator: bool,
    /// When the peer first contacts a bootstrap server.
    pub join_at_ms: u64,
}

impl Default for PeerProfile {
    fn default() -> Self {
        PeerProfile { step_ms: 100.0, coordinator: false, join_at_ms: 0 }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum BootPurpose {
    Fire,
    Register,
    DatasetRegistered(u64),
    LeaderFor(u64),
    CreatorLiveness(PeerId),
}

#[derive(Clone, Debug)]
pub(crate) enum CallPurpose {
    Op(u64),
    Background,
    SnapshotRefresh(PeerId),
}

#[derive(Clone, Debug)]
pub(crate) enum Outstanding {
    Boot { call: BootCall, purpose: BootPurpose, attempts: u32 },
    Tracker { call: u64 },
    Backoff { call: u64 },
    Create { op: u64 },
    Chunk { op: u64, file: usize, offset: u64, length: u64, holder: Contact },
    Transfer { hash: PeerId },
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum LookupPurpose {
    Place(u64),
    Maintain(PeerId),
    Locate(u64),
}

/// A request that must reach a dataset's current tracker leader.
#[derive(Clone, Debug)]
pub(crate) struct LeaderCall {
    pub hash: PeerId,
    pub call: TrackerCall,
    pub purpose: CallPurpose,
    pub attempts: u32,
}

/// A Hydra peer: DHT participant, tracker host, dataset client.
#[derive(Debug)]
pub struct PeerNode {
    pub(crate) me: NodeId,
    pub(crate) params: NetParams,
    pub(crate) profile: PeerProfile,
    // Survives crashes.
    pub(crate) store: BTreeMap<(PeerId, String), u64>,
    pub(crate) trackers: BTreeMap<PeerId, TrackerReplica>,
    pub(crate) views: BTreeMap<PeerId, DatasetMeta>,
    pub(crate) seq: u64,
    pub(crate) reports: Vec<(u64, OpReport)>,
    // Lost on crash.
    pub(crate) peer_id: Option<PeerId>,
    pub(crate) dht: Option<DhtNode>,
    pub(crate) next_id: u64,
    pub(crate) requests: BTreeMap<ReqId, Outstanding>,
    pub(crate) lookups: BTreeMap<u64, LookupPurpose>,
    pub(crate) ops: BTreeMap<u64, Op>,
    pub(crate) calls: BTreeMap<u64, LeaderCall>,
    pub(crate) leader_cache: BTreeMap<PeerId, NodeId>,
    pub(crate) watches: BTreeMap<PeerId, CreatorWatch>,
}

impl PeerNode {
    pub fn new(me: NodeId, params: NetParams, profile: PeerProfile) -> Self {
        PeerNode {
            me,
            params,
            profile,
            store: BTreeMap::new(),
            trackers: BTreeMap::new(),
            views: BTreeMap::new(),
            seq: 0,
            reports: Vec::new(),
            peer_id: None,
            dht: None,
            next_id: 1,
            requests: BTreeMap::new(),
            lookups: BTreeMap::new(),
            ops: BTreeMap::new(),
            calls: BTreeMap::new(),
            leader_cache: BTreeMap::new(),
            watches: BTreeMap::new(),
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.me
    }

    pub fn peer_id(&self) -> Option<PeerId> {
        self.peer_id
    }

    pub fn contact(&self) -> Option<Contact> {
        self.peer_id.map(|peer_id| Contact { peer_id, address: self.me })
    }

    pub fn profile(&self) -> &PeerProfile {
        &self.profile
    }

    pub fn dht(&self) -> Option<&DhtNode> {
        self.dht.as_ref()
    }

    pub fn is_registered(&self) -> bool {
        self.dht.is_some()
    }

    pub fn trackers(&self) -> &BTreeMap<PeerId, TrackerReplica> {
        &self.trackers
    }

    pub fn tracker(&self, hash: &PeerId) -> Option<&TrackerReplica> {
        self.trackers.get(hash)
    }

    pub fn holds(&self, hash: PeerId, filename: &str) -> bool {
        self.store.contains_key(&(hash, filename.to_string()))
    }

    pub fn stored_files(&self) -> impl Iterator<Item = (&PeerId, &str, u64)> {
        self.store.iter().map(|((h, f), s)| (h, f.as_str(), *s))
    }

    pub fn view(&self, hash: &PeerId) -> Option<&DatasetMeta> {
        self.views.get(hash)
    }

    pub fn reports(&self) -> &[(u64, OpReport)] {
        &self.reports
    }

    pub fn report(&self, op: u64) -> Option<&OpReport> {
        self.reports.iter().rev().find(|(id, _)| *id == op).map(|(_, r)| r)
    }

    pub fn watch(&self, hash: &PeerId) -> Option<&CreatorWatch> {
        self.watches.get(hash)
    }

    pub(crate) fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub(crate) fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn my_bootstrap(&self) -> NodeId {
        let b = &self.params.bootstrap;
        b[self.me.index() % b.len()]
    }

    pub(crate) fn on_start<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E) {
        env.set_timer(self.profile.join_at_ms, NetTimer::Register);
    }

    pub(crate) fn on_crash(&mut self) {
        self.peer_id = None;
        self.dht = None;
        self.requests.clear();
        self.lookups.clear();
        self.ops.clear();
        self.calls.clear();
        self.leader_cache.clear();
        self.watches.clear();
        for rep in self.trackers.values_mut() {
            rep.crash();
        }
    }

    pub(crate) fn on_restart<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E) {
        env.set_timer(0, NetTimer::Register);
        let hashes: Vec<PeerId> = self.trackers.keys().copied().collect();
        for h in hashes {
            self.restart_replica(env, h);
        }
    }

    /// Sends a bootstrap call and retries it on timeout.
    pub(crate) fn boot_call<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, call: BootCall, purpose: BootPurpose) {
        self.boot_call_attempt(env, call, purpose, 1);
    }

    fn boot_call_attempt<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        call: BootCall,
        purpose: BootPurpose,
        attempts: u32,
    ) {
        let id = self.fresh_id();
        env.send(self.my_bootstrap(), NetMsg::BootReq { id, call: call.clone() });
        env.set_timer(self.params.request_timeout_ms, NetTimer::Request { id });
        self.requests.insert(id, Outstanding::Boot { call, purpose, attempts });
    }

    /// Starts a call routed to the tracker leader of `hash`.
    pub(crate) fn leader_call<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        hash: PeerId,
        call: TrackerCall,
        purpose: CallPurpose,
    ) -> u64 {
        let id = self.fresh_id();
        self.calls.insert(id, LeaderCall { hash, call, purpose, attempts: 0 });
        self.issue_call(env, id);
        id
    }

    fn issue_call<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, call_id: u64) {
        let Some(c) = self.calls.get_mut(&call_id) else {
            return;
        };
        c.attempts += 1;
        if c.attempts > self.params.max_attempts {
            self.finish_call(env, call_id, Err("tracker unreachable".into()));
            return;
        }
        let hash = c.hash;
        match self.leader_cache.get(&hash).copied() {
            Some(leader) => {
                let call = c.call.clone();
                let id = self.fresh_id();
                env.send(leader, NetMsg::TrackerReq { id, hash, call });
                env.set_timer(self.params.request_timeout_ms, NetTimer::Request { id });
                self.requests.insert(id, Outstanding::Tracker { call: call_id });
            }
            None => self.boot_call(env, BootCall::GetLeader { hash }, BootPurpose::LeaderFor(call_id)),
        }
    }

    fn backoff_call<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, call_id: u64) {
        let id = self.fresh_id();
        env.set_timer(self.params.retry_backoff_ms, NetTimer::Request { id });
        self.requests.insert(id, Outstanding::Backoff { call: call_id });
    }

    fn finish_call<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, call_id: u64, result: Result<TrackerAnswer, String>) {
        let Some(c) = self.calls.remove(&call_id) else {
            return;
        };
        match c.purpose {
            CallPurpose::Op(op) => self.on_op_call_done(env, op, result),
            CallPurpose::Background => {}
            CallPurpose::SnapshotRefresh(hash) => {
                if let Ok(TrackerAnswer::View(meta)) = result {
                    self.store_snapshot(env, hash, meta);
                }
            }
        }
    }

    pub(crate) fn drain_lookups<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E) {
        let Some(dht) = self.dht.as_mut() else {
            return;
        };
        for result in dht.take_finished() {
            match self.lookups.remove(&result.query) {
                Some(LookupPurpose::Place(op)) => self.on_place_lookup(env, op, result),
                Some(LookupPurpose::Maintain(hash)) => self.on_maintain_lookup(env, hash, result),
                Some(LookupPurpose::Locate(op)) => {
                    let report = OpReport::Located { target: result.target, found: result.found(), rounds: result.rounds };
                    self.reports.push((op, report));
                }
                None => {}
            }
        }
    }

    pub(crate) fn on_message<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, from: NodeId, msg: NetMsg) {
        match msg {
            NetMsg::Dht(m) => {
                if let Some(dht) = self.dht.as_mut() {
                    dht.on_message(&mut dht_env!(env), from, m);
                    self.drain_lookups(env);
                }
            }
            NetMsg::BootResp { id, answer } => self.on_boot_answer(env, id, answer),
            NetMsg::TrackerResp { id, answer } => self.on_tracker_answer(env, id, answer),
            NetMsg::Ping { nonce } => env.send(from, NetMsg::Pong { nonce }),
            NetMsg::Raft { hash, incarnation, msg } => self.on_raft(env, from, hash, incarnation, msg),
            NetMsg::TrackerReq { id, hash, call } => self.on_tracker_request(env, from, id, hash, call),
            NetMsg::StateTransfer { hash, title, creator, incarnation, term, initial_members, log } => {
                self.on_state_transfer(env, from, hash, title, creator, incarnation, term, initial_members, log)
            }
            NetMsg::StateTransferAck { hash, incarnation, accepted } => {
                self.on_transfer_ack(env, from, hash, incarnation, accepted)
            }
            NetMsg::Snapshot { meta, taken_at } => self.on_snapshot_push(env, meta, taken_at),
            NetMsg::GetChunk { id, hash, filename, offset, length } => {
                self.serve_chunk(env, from, id, hash, filename, offset, length)
            }
            NetMsg::Chunk { id, chunk } => self.on_chunk(env, id, chunk),
            NetMsg::BootReq { .. }
            | NetMsg::Replicate { .. }
            | NetMsg::ReplicateAck { .. }
            | NetMsg::Pong { .. } => {}
        }
    }

    pub(crate) fn on_timer<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, timer: NetTimer) {
        match timer {
            NetTimer::Dht(t) => {
                if let Some(dht) = self.dht.as_mut() {
                    dht.on_timer(&mut dht_env!(env), t);
                    self.drain_lookups(env);
                }
            }
            NetTimer::Register => {
                if self.dht.is_none() && !self.requests.values().any(|o| matches!(o, Outstanding::Boot { purpose: BootPurpose::Register, .. })) {
                    self.boot_call(env, BootCall::RegisterPeer, BootPurpose::Register);
                }
            }
            NetTimer::Request { id } => {
                if let Some(o) = self.requests.remove(&id) {
                    self.on_request_timeout(env, o);
                }
            }
            NetTimer::Refresh => {
                if let Some(dht) = self.dht.as_mut() {
                    dht.refresh_self(&mut dht_env!(env));
                    self.drain_lookups(env);
                    self.arm_refresh(env);
                }
            }
            NetTimer::Raft { hash, incarnation, timer } => self.on_raft_timer(env, hash, incarnation, timer),
            NetTimer::Maintain { hash } => self.on_maintain_timer(env, hash),
            NetTimer::SnapshotPoll { hash } => self.on_snapshot_poll(env, hash),
            NetTimer::CreatorPoll { hash } => self.on_creator_poll(env, hash),
            NetTimer::PingDeadline { .. } | NetTimer::Audit => {}
        }
    }

    fn on_request_timeout<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, o: Outstanding) {
        match o {
            Outstanding::Boot { call, purpose, attempts } => {
                if attempts < self.params.max_attempts {
                    self.boot_call_attempt(env, call, purpose, attempts + 1);
                } else {
                    self.on_boot_result(env, purpose, BootAnswer::Error("bootstrap unreachable".into()));
                }
            }
            Outstanding::Tracker { call } => {
                if let Some(c) = self.calls.get(&call) {
                    self.leader_cache.remove(&c.hash);
                }
                self.issue_call(env, call);
            }
            Outstanding::Backoff { call } => self.issue_call(env, call),
            Outstanding::Create { op } => self.on_create_timeout(env, op),
            Outstanding::Chunk { op, file, offset, length, holder } => {
                self.on_chunk_failed(env, op, file, offset, length, holder)
            }
            Outstanding::Transfer { hash } => self.on_transfer_timeout(env, hash),
        }
    }

    fn on_boot_answer<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, id: ReqId, answer: BootAnswer) {
        match self.requests.remove(&id) {
            Some(Outstanding::Boot { purpose, .. }) => self.on_boot_result(env, purpose, answer),
            Some(other) => {
                self.requests.insert(id, other);
            }
            None => {}
        }
    }

    fn on_boot_result<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, purpose: BootPurpose, answer: BootAnswer) {
        match purpose {
            BootPurpose::Fire => {}
            BootPurpose::Register => match answer {
                BootAnswer::Registered { peer_id, seeds } => self.on_registered(env, peer_id, seeds),
                _ => env.set_timer(self.params.retry_backoff_ms, NetTimer::Register),
            },
            BootPurpose::DatasetRegistered(op) => self.on_dataset_registered(env, op, answer),
            BootPurpose::LeaderFor(call) => match answer {
                BootAnswer::Leader { leader, .. } => {
                    if let Some(c) = self.calls.get(&call) {
                        self.leader_cache.insert(c.hash, leader);
                    }
                    self.issue_call(env, call);
                }
                BootAnswer::Error(e) if e == "unknown dataset" => {
                    self.finish_call(env, call, Ok(TrackerAnswer::Unknown));
                }
                BootAnswer::Error(e) => self.finish_call(env, call, Err(e)),
                _ => self.backoff_call(env, call),
            },
            BootPurpose::CreatorLiveness(hash) => self.on_liveness(env, hash, answer),
        }
    }

    fn on_registered<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, peer_id: PeerId, seeds: Vec<Contact>) {
        if self.dht.is_some() {
            return;
        }
        self.peer_id = Some(peer_id);
        let mut dht = DhtNode::new(Contact { peer_id, address: self.me }, self.params.dht.clone());
        for s in seeds {
            dht.insert(&mut dht_env!(env), s);
        }
        dht.refresh(&mut dht_env!(env));
        self.dht = Some(dht);
        self.arm_refresh(env);
        env.metric("peer_registered", 1.0);
    }

    fn arm_refresh<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E) {
        let mean = self.params.refresh_ms.max(2);
        let after = env.rng().random_range(mean / 2..=mean + mean / 2);
        env.set_timer(after, NetTimer::Refresh);
    }

    fn on_tracker_answer<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, id: ReqId, answer: TrackerAnswer) {
        match self.requests.remove(&id) {
            Some(Outstanding::Tracker { call }) => match answer {
                TrackerAnswer::NotLeader { hint } => {
                    let hash = self.calls.get(&call).map(|c| c.hash);
                    match (hash, hint) {
                        (Some(h), Some(leader)) if Some(&leader) != self.leader_cache.get(&h) => {
                            self.leader_cache.insert(h, leader);
                            self.issue_call(env, call);
                        }
                        (Some(h), _) => {
                            self.leader_cache.remove(&h);
                            self.backoff_call(env, call);
                        }
                        (None, _) => {}
                    }
                }
                TrackerAnswer::Unknown => {
                    if let Some(c) = self.calls.get(&call) {
                        self.leader_cache.remove(&c.hash);
                    }
                    self.backoff_call(env, call);
                }
                other => self.finish_call(env, call, Ok(other)),
            },
            Some(Outstanding::Create { op }) => self.on_create_answer(env, op, answer),
            Some(other) => {
                self.requests.insert(id, other);
            }
            None => {}
        }
    }
}
