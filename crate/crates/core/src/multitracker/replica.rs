use crate::bootstrap::LeaderReport;
use crate::dht::{Contact, LookupResult, PeerId};
use crate::network::{
    dht_env, BootCall, BootPurpose, LookupPurpose, NetMsg, NetTimer, Outstanding, PeerNode, ReqId, TrackerAnswer,
    TrackerCall,
};
use crate::raft::{LogEntry, LogIndex, Payload, RaftConfig, RaftMsg, RaftNode, RaftTimer, Term};
use crate::registry::{Applied, DatasetMeta, TrackerCommand};
use crate::sim::{Env, NodeId};
use std::collections::{BTreeMap, BTreeSet};

macro_rules! raft_env {
    ($env:expr, $hash:expr, $inc:expr) => {{
        let (hash, incarnation) = ($hash, $inc);
        $env.scoped(
            move |msg| NetMsg::Raft { hash, incarnation, msg },
            move |timer| NetTimer::Raft { hash, incarnation, timer },
        )
    }};
}

/// Widest candidate search a repair runs before the group goes degraded.
const MAX_REPAIR_WIDTH: usize = 256;

/// Replacement of a dead or missing member, driven by the leader.
#[derive(Clone, Debug)]
struct Repair {
    candidates: Vec<Contact>,
    next: usize,
    awaiting: Option<(Contact, ReqId)>,
    /// Width of the current candidate search; doubled when every candidate
    /// it returned refused.
    width: usize,
    tried: BTreeSet<NodeId>,
}

/// One peer's replica of a dataset's tracker group.
///
/// The Raft log and the identity of the group survive crashes; the metadata
/// is rebuilt by replaying committed entries.
#[derive(Clone, Debug)]
pub struct TrackerReplica {
    hash: PeerId,
    title: String,
    creator: Contact,
    incarnation: u32,
    raft: RaftNode<TrackerCommand>,
    meta: Option<DatasetMeta>,
    /// Metadata to install once this replica leads a fresh group.
    init: Option<DatasetMeta>,
    pending: BTreeMap<LogIndex, (Term, NodeId, ReqId)>,
    create_reply: Option<(NodeId, ReqId)>,
    reported: Option<(Term, Vec<NodeId>)>,
    maintain_armed: bool,
    repair: Option<Repair>,
    degraded: bool,
    pushed_version: u64,
}

impl TrackerReplica {
    fn fresh(me: NodeId, meta: DatasetMeta, incarnation: u32, cfg: RaftConfig) -> Self {
        let mut r = Self::with_raft(&meta.title, meta.hash, meta.creator, incarnation, RaftNode::new(me, vec![me], cfg));
        r.init = Some(meta);
        r
    }

    fn with_raft(title: &str, hash: PeerId, creator: Contact, incarnation: u32, raft: RaftNode<TrackerCommand>) -> Self {
        TrackerReplica {
            hash,
            title: title.to_string(),
            creator,
            incarnation,
            raft,
            meta: None,
            init: None,
            pending: BTreeMap::new(),
            create_reply: None,
            reported: None,
            maintain_armed: false,
            repair: None,
            degraded: false,
            pushed_version: 0,
        }
    }

    pub fn hash(&self) -> PeerId {
        self.hash
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn creator(&self) -> Contact {
        self.creator
    }

    pub fn incarnation(&self) -> u32 {
        self.incarnation
    }

    pub fn raft(&self) -> &RaftNode<TrackerCommand> {
        &self.raft
    }

    /// Metadata as of the last applied entry, if the initial entry has been applied.
    pub fn meta(&self) -> Option<&DatasetMeta> {
        self.meta.as_ref()
    }

    pub fn members(&self) -> &[NodeId] {
        self.raft.members()
    }

    /// The leader found no candidate to restore the replica count.
    pub fn degraded(&self) -> bool {
        self.degraded
    }

    pub(crate) fn crash(&mut self) {
        self.raft.crash();
        self.meta = None;
        self.init = None;
        self.pending.clear();
        self.create_reply = None;
        self.reported = None;
        self.maintain_armed = false;
        self.repair = None;
        self.pushed_version = 0;
    }

    fn has_init(&self) -> bool {
        self.raft.log().iter().any(|e| matches!(e.payload, Payload::Command(TrackerCommand::Init(_))))
    }

    /// Whether the latest membership entry has committed.
    fn config_settled(&self) -> bool {
        let last_config = self
            .raft
            .log()
            .iter()
            .rev()
            .find(|e| matches!(e.payload, Payload::SetMembers(_)))
            .map_or(0, |e| e.index);
        self.raft.commit_index() >= last_config
    }
}

impl PeerNode {
    pub(crate) fn restart_replica<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId) {
        if let Some(r) = self.trackers.get_mut(&hash) {
            let inc = r.incarnation;
            r.raft.start(&mut raft_env!(env, hash, inc));
        }
    }

    pub(crate) fn on_raft<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        from: NodeId,
        hash: PeerId,
        incarnation: u32,
        msg: RaftMsg<TrackerCommand>,
    ) {
        let Some(r) = self.trackers.get_mut(&hash) else {
            return;
        };
        if r.incarnation != incarnation {
            return;
        }
        r.raft.on_message(&mut raft_env!(env, hash, incarnation), from, msg);
        self.after_raft(env, hash);
    }

    pub(crate) fn on_raft_timer<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        hash: PeerId,
        incarnation: u32,
        timer: RaftTimer,
    ) {
        let Some(r) = self.trackers.get_mut(&hash) else {
            return;
        };
        if r.incarnation != incarnation {
            return;
        }
        r.raft.on_timer(&mut raft_env!(env, hash, incarnation), timer);
        self.after_raft(env, hash);
    }

    /// Applies newly committed entries, answers waiting clients and runs
    /// leader duties.
    fn after_raft<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId) {
        let me = self.me;
        let mut boot_calls = Vec::new();
        {
            let Some(r) = self.trackers.get_mut(&hash) else {
                return;
            };
            let inc = r.incarnation;
            for entry in r.raft.drain_committed() {
                apply_entry(env, me, r, entry);
            }
            if r.raft.is_leader() {
                if r.meta.is_none() && !r.has_init() {
                    if let Some(init) = r.init.clone() {
                        let _ = r.raft.propose(&mut raft_env!(env, hash, inc), TrackerCommand::Init(init));
                        for entry in r.raft.drain_committed() {
                            apply_entry(env, me, r, entry);
                        }
                    }
                }
                let key = (r.raft.term(), r.raft.members().to_vec());
                if r.meta.is_some() && r.reported.as_ref() != Some(&key) {
                    let report =
                        LeaderReport { leader: me, incarnation: inc, term: key.0, members: key.1.clone() };
                    boot_calls.push(BootCall::UpdateLeader { hash, report });
                    env.metric("tracker_leader_report", key.0 as f64);
                    r.reported = Some(key);
                }
                if !r.maintain_armed {
                    r.maintain_armed = true;
                    env.set_timer(self.params.maintain_ms, NetTimer::Maintain { hash });
                }
                if let Some(m) = &r.meta {
                    let every = self.params.snapshot_every.max(1);
                    if m.version / every > r.pushed_version / every {
                        r.pushed_version = m.version;
                        let msg = NetMsg::Snapshot { meta: m.clone(), taken_at: env.now().0 };
                        env.send(r.creator.address, msg);
                    }
                }
            } else {
                r.reported = None;
                r.repair = None;
                let hint = r.raft.leader_hint().filter(|h| *h != me);
                for (_, (_, client, id)) in std::mem::take(&mut r.pending) {
                    env.send(client, NetMsg::TrackerResp { id, answer: TrackerAnswer::NotLeader { hint } });
                }
            }
        }
        for call in boot_calls {
            self.boot_call(env, call, BootPurpose::Fire);
        }
    }

    pub(crate) fn on_tracker_request<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        from: NodeId,
        id: ReqId,
        hash: PeerId,
        call: TrackerCall,
    ) {
        let me = self.me;
        let reply = |env: &mut E, answer| env.send(from, NetMsg::TrackerResp { id, answer });
        match call {
            TrackerCall::Create { meta, incarnation } => {
                if self.profile.coordinator || self.dht.is_none() {
                    return reply(env, TrackerAnswer::Refused("not eligible".into()));
                }
                if meta.hash != hash {
                    return reply(env, TrackerAnswer::Refused("hash mismatch".into()));
                }
                match self.trackers.get_mut(&hash) {
                    Some(r) if r.incarnation > incarnation => {
                        reply(env, TrackerAnswer::Refused("newer group exists".into()))
                    }
                    Some(r) if r.incarnation == incarnation => {
                        if r.meta.is_some() && r.raft.is_leader() {
                            reply(env, TrackerAnswer::Created { leader: me })
                        } else if r.init.is_some() {
                            r.create_reply = Some((from, id));
                        } else {
                            reply(env, TrackerAnswer::Refused("already a member".into()))
                        }
                    }
                    _ => {
                        let mut r = TrackerReplica::fresh(me, meta, incarnation, self.params.raft);
                        r.create_reply = Some((from, id));
                        r.raft.start(&mut raft_env!(env, hash, incarnation));
                        self.trackers.insert(hash, r);
                        env.metric("tracker_started", incarnation as f64);
                    }
                }
            }
            TrackerCall::GetPeers => match self.trackers.get(&hash) {
                None => reply(env, TrackerAnswer::Unknown),
                Some(r) => match (&r.meta, r.raft.is_leader()) {
                    (Some(m), true) => reply(env, TrackerAnswer::View(m.clone())),
                    _ => reply(env, TrackerAnswer::NotLeader { hint: r.raft.leader_hint().filter(|h| *h != me) }),
                },
            },
            TrackerCall::Submit(TrackerCommand::Init(_)) => {
                reply(env, TrackerAnswer::Rejected("init is internal".into()))
            }
            TrackerCall::Submit(cmd) => {
                let Some(r) = self.trackers.get_mut(&hash) else {
                    return reply(env, TrackerAnswer::Unknown);
                };
                if r.meta.is_none() || !r.raft.is_leader() {
                    let hint = r.raft.leader_hint().filter(|h| *h != me);
                    return reply(env, TrackerAnswer::NotLeader { hint });
                }
                let inc = r.incarnation;
                match r.raft.propose(&mut raft_env!(env, hash, inc), cmd) {
                    Ok((index, term)) => {
                        r.pending.insert(index, (term, from, id));
                    }
                    Err(nl) => return reply(env, TrackerAnswer::NotLeader { hint: nl.hint }),
                }
                self.after_raft(env, hash);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn on_state_transfer<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        from: NodeId,
        hash: PeerId,
        title: String,
        creator: Contact,
        incarnation: u32,
        term: u64,
        initial_members: Vec<NodeId>,
        log: Vec<LogEntry<TrackerCommand>>,
    ) {
        let eligible = !self.profile.coordinator
            && self.dht.is_some()
            && self.trackers.get(&hash).is_none_or(|r| r.incarnation <= incarnation);
        if eligible {
            let raft = RaftNode::from_transfer(self.me, initial_members, term, log, self.params.raft);
            let mut r = TrackerReplica::with_raft(&title, hash, creator, incarnation, raft);
            r.raft.start(&mut raft_env!(env, hash, incarnation));
            self.trackers.insert(hash, r);
            env.metric("state_transfer", 1.0);
        }
        env.send(from, NetMsg::StateTransferAck { hash, incarnation, accepted: eligible });
    }

    pub(crate) fn on_maintain_timer<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId) {
        let me = self.me;
        let target = self.params.replicas;
        let dead_after = self.params.dead_after_ms;
        let Some(r) = self.trackers.get_mut(&hash) else {
            return;
        };
        if !r.raft.is_leader() {
            r.maintain_armed = false;
            return;
        }
        env.set_timer(self.params.maintain_ms, NetTimer::Maintain { hash });
        if r.repair.is_some() || r.meta.is_none() || !r.config_settled() {
            return;
        }
        let inc = r.incarnation;
        let members = r.raft.members().to_vec();
        let dead: Vec<NodeId> = r
            .raft
            .follower_silence(env.now())
            .into_iter()
            .filter(|(p, silent)| *silent > dead_after && *p != me)
            .map(|(p, _)| p)
            .collect();
        if let Some(d) = dead.first() {
            if members.len() > target {
                let next: Vec<NodeId> = members.iter().copied().filter(|m| m != d).collect();
                if r.raft.propose_members(&mut raft_env!(env, hash, inc), next).is_ok() {
                    env.metric("tracker_member_removed", d.0 as f64);
                }
                self.after_raft(env, hash);
                return;
            }
        } else if members.len() >= target {
            r.degraded = false;
            return;
        }
        let width = self.params.dht.fan_out + target;
        r.repair = Some(Repair { candidates: Vec::new(), next: 0, awaiting: None, width, tried: BTreeSet::new() });
        self.search_candidates(env, hash, width);
    }

    fn search_candidates<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId, width: usize) {
        let Some(dht) = self.dht.as_mut() else {
            return;
        };
        let q = dht.start_lookup(&mut dht_env!(env), hash, width, None);
        self.lookups.insert(q, LookupPurpose::Maintain(hash));
        self.drain_lookups(env);
    }

    pub(crate) fn on_maintain_lookup<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId, result: LookupResult) {
        let me = self.me;
        let bootstrap = self.params.bootstrap.clone();
        let Some(r) = self.trackers.get_mut(&hash) else {
            return;
        };
        let Some(repair) = r.repair.as_mut() else {
            return;
        };
        if !r.raft.is_leader() {
            r.repair = None;
            return;
        }
        let members = r.raft.members();
        repair.candidates = result
            .responders
            .into_iter()
            .filter(|c| c.address != me && !members.contains(&c.address) && !bootstrap.contains(&c.address))
            .filter(|c| !repair.tried.contains(&c.address))
            .collect();
        repair.next = 0;
        self.try_transfer(env, hash);
    }

    /// Sends the full log to the next candidate, or gives up and runs degraded.
    fn try_transfer<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId) {
        let me = self.me;
        let dead_after = self.params.dead_after_ms;
        let target = self.params.replicas;
        let Some(r) = self.trackers.get_mut(&hash) else {
            return;
        };
        let Some(repair) = r.repair.as_mut() else {
            return;
        };
        if let Some(cand) = repair.candidates.get(repair.next).copied() {
            repair.next += 1;
            repair.tried.insert(cand.address);
            let id = self.next_id;
            self.next_id += 1;
            repair.awaiting = Some((cand, id));
            let msg = NetMsg::StateTransfer {
                hash,
                title: r.title.clone(),
                creator: r.creator,
                incarnation: r.incarnation,
                term: r.raft.term(),
                initial_members: r.raft.initial_members().to_vec(),
                log: r.raft.log().to_vec(),
            };
            env.send(cand.address, msg);
            env.set_timer(self.params.request_timeout_ms, NetTimer::Request { id });
            self.requests.insert(id, Outstanding::Transfer { hash });
            return;
        }
        // Everyone found so far refused; search wider while that still
        // turns up new peers.
        if !repair.candidates.is_empty() && repair.width < MAX_REPAIR_WIDTH {
            repair.width *= 2;
            let width = repair.width;
            self.search_candidates(env, hash, width);
            return;
        }
        r.repair = None;
        let inc = r.incarnation;
        let mut members = r.raft.members().to_vec();
        let dead = r
            .raft
            .follower_silence(env.now())
            .into_iter()
            .find(|(p, silent)| *silent > dead_after && *p != me)
            .map(|(p, _)| p);
        if let Some(d) = dead {
            members.retain(|m| *m != d);
            let _ = r.raft.propose_members(&mut raft_env!(env, hash, inc), members.clone());
            env.metric("tracker_member_removed", d.0 as f64);
        }
        if members.len() < target && !r.degraded {
            r.degraded = true;
            env.metric("tracker_degraded", members.len() as f64);
        }
        self.after_raft(env, hash);
    }

    pub(crate) fn on_transfer_ack<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        from: NodeId,
        hash: PeerId,
        incarnation: u32,
        accepted: bool,
    ) {
        let Some(r) = self.trackers.get_mut(&hash) else {
            return;
        };
        let Some(repair) = r.repair.as_mut() else {
            return;
        };
        let Some((cand, id)) = repair.awaiting else {
            return;
        };
        if cand.address != from || r.incarnation != incarnation {
            return;
        }
        repair.awaiting = None;
        self.requests.remove(&id);
        if !accepted || !r.raft.is_leader() {
            self.try_transfer(env, hash);
            return;
        }
        r.repair = None;
        let mut members = r.raft.members().to_vec();
        members.push(cand.address);
        if r.raft.propose_members(&mut raft_env!(env, hash, incarnation), members).is_ok() {
            env.metric("tracker_member_added", cand.address.0 as f64);
        }
        self.after_raft(env, hash);
    }

    pub(crate) fn on_transfer_timeout<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId) {
        if let Some(repair) = self.trackers.get_mut(&hash).and_then(|r| r.repair.as_mut()) {
            repair.awaiting = None;
        }
        self.try_transfer(env, hash);
    }
}

fn apply_entry<E: Env<NetMsg, NetTimer>>(env: &mut E, me: NodeId, r: &mut TrackerReplica, entry: LogEntry<TrackerCommand>) {
    let waiting = r.pending.remove(&entry.index);
    let answer = match entry.payload {
        Payload::Command(TrackerCommand::Init(m)) => {
            if r.meta.is_none() {
                r.meta = Some(m);
                r.init = None;
            }
            if let Some((client, id)) = r.create_reply.take() {
                env.send(client, NetMsg::TrackerResp { id, answer: TrackerAnswer::Created { leader: me } });
            }
            None
        }
        Payload::Command(cmd) => r.meta.as_mut().map(|m| match m.apply(&cmd) {
            Applied::Changed => TrackerAnswer::Committed { changed: true, meta: m.clone() },
            Applied::Unchanged | Applied::Duplicate => TrackerAnswer::Committed { changed: false, meta: m.clone() },
            Applied::Rejected(why) => TrackerAnswer::Rejected(why),
        }),
        Payload::Noop | Payload::SetMembers(_) => None,
    };
    if let Some((term, client, id)) = waiting {
        let answer = match answer {
            Some(a) if term == entry.term => a,
            _ => TrackerAnswer::NotLeader { hint: None },
        };
        env.send(client, NetMsg::TrackerResp { id, answer });
    }
}
