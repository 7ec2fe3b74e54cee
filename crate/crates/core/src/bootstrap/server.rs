use super::state::{BootUpdate, BootstrapState};
use crate::coin::{Ledger, LedgerError, Posted};
use crate::dht::{bucket_index, Contact, DhtNode, PeerId};
use crate::network::{BootAnswer, BootCall, CoinCall, NetMsg, NetParams, NetTimer, ReqId};
use crate::sim::{Env, NodeId, SimTime};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug)]
enum AfterWrite {
    Reply { to: NodeId, id: ReqId, answer: BootAnswer },
    Induct { client: NodeId, id: ReqId, peer_id: PeerId },
    Nothing,
}

#[derive(Debug)]
enum Forward {
    Relay { client: NodeId, id: ReqId },
    Induct { client: NodeId, id: ReqId },
}

#[derive(Debug)]
struct Poll {
    hash: PeerId,
    incarnation: u32,
    awaiting: BTreeSet<NodeId>,
    live: BTreeSet<NodeId>,
    reply_to: Option<(NodeId, ReqId)>,
}

/// An always-on server: issues ids, inducts peers into the DHT, keeps the
/// replicated dataset index, and audits tracker liveness.
#[derive(Debug)]
pub struct BootstrapServer {
    me: NodeId,
    params: NetParams,
    pub state: BootstrapState,
    pub dht: DhtNode,
    /// Owned by the primary only.
    pub ledger: Option<Ledger>,
    next_id: u64,
    writes: BTreeMap<u64, (BTreeSet<NodeId>, AfterWrite)>,
    forwards: BTreeMap<ReqId, Forward>,
    inductions: BTreeMap<u64, (NodeId, ReqId, PeerId)>,
    polls: BTreeMap<u64, Poll>,
    dead_since: BTreeMap<PeerId, SimTime>,
}

macro_rules! dht_env {
    ($env:expr) => {
        $env.scoped(NetMsg::Dht, NetTimer::Dht)
    };
}

impl BootstrapServer {
    pub fn new(me: NodeId, params: NetParams, state: BootstrapState, dht: DhtNode, ledger: Option<Ledger>) -> Self {
        BootstrapServer {
            me,
            params,
            state,
            dht,
            ledger,
            next_id: 1,
            writes: BTreeMap::new(),
            forwards: BTreeMap::new(),
            inductions: BTreeMap::new(),
            polls: BTreeMap::new(),
            dead_since: BTreeMap::new(),
        }
    }

    fn primary(&self) -> NodeId {
        self.params.bootstrap[0]
    }

    pub fn is_primary(&self) -> bool {
        self.me == self.primary()
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn on_start<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E) {
        if self.is_primary() {
            env.set_timer(self.params.audit_ms, NetTimer::Audit);
        }
    }

    pub fn on_message<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, from: NodeId, msg: NetMsg) {
        match msg {
            NetMsg::Dht(m) => {
                self.dht.on_message(&mut dht_env!(env), from, m);
                self.drain_lookups(env);
            }
            NetMsg::BootReq { id, call } => self.on_call(env, from, id, call),
            NetMsg::BootResp { id, answer } => self.on_forward_reply(env, id, answer),
            NetMsg::Replicate { op, update } => {
                self.state.apply(&update);
                self.learn_issued(env, &update);
                env.send(from, NetMsg::ReplicateAck { op });
            }
            NetMsg::ReplicateAck { op } => {
                let done = match self.writes.get_mut(&op) {
                    Some((awaiting, _)) => {
                        awaiting.remove(&from);
                        awaiting.is_empty()
                    }
                    None => false,
                };
                if done {
                    let (_, after) = self.writes.remove(&op).expect("present above");
                    self.after_write(env, after);
                }
            }
            NetMsg::Ping { nonce } => env.send(from, NetMsg::Pong { nonce }),
            NetMsg::Pong { nonce } => {
                if let Some(p) = self.polls.get_mut(&nonce) {
                    if p.awaiting.remove(&from) {
                        p.live.insert(from);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn on_timer<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, timer: NetTimer) {
        match timer {
            NetTimer::Dht(t) => {
                self.dht.on_timer(&mut dht_env!(env), t);
                self.drain_lookups(env);
            }
            NetTimer::PingDeadline { poll } => self.finish_poll(env, poll),
            NetTimer::Audit => {
                let hashes: Vec<PeerId> = self.state.records().filter(|r| !r.lost).map(|r| r.hash).collect();
                for h in hashes {
                    self.start_poll(env, h, None);
                }
                env.set_timer(self.params.audit_ms, NetTimer::Audit);
            }
            _ => {}
        }
    }

    fn on_call<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, from: NodeId, id: ReqId, call: BootCall) {
        if call.is_write() && !self.is_primary() {
            let fid = self.fresh_id();
            self.forwards.insert(fid, Forward::Relay { client: from, id });
            env.send(self.primary(), NetMsg::BootReq { id: fid, call });
            return;
        }
        match call {
            BootCall::RegisterPeer => {
                if self.is_primary() {
                    let (peer_id, update) = self.state.register_peer(from);
                    let after = AfterWrite::Induct { client: from, id, peer_id };
                    match update {
                        Some(u) => self.replicate(env, u, after),
                        None => self.after_write(env, after),
                    }
                } else {
                    let fid = self.fresh_id();
                    self.forwards.insert(fid, Forward::Induct { client: from, id });
                    env.send(self.primary(), NetMsg::BootReq { id: fid, call: BootCall::IssueId { node: from } });
                }
            }
            BootCall::IssueId { node } => {
                let (peer_id, update) = self.state.register_peer(node);
                let after = AfterWrite::Reply { to: from, id, answer: BootAnswer::Issued { peer_id } };
                match update {
                    Some(u) => {
                        self.learn_issued(env, &u);
                        self.replicate(env, u, after)
                    }
                    None => self.after_write(env, after),
                }
            }
            BootCall::ListDatasets => {
                let list = self.state.list_datasets();
                send_answer(env, from, id, BootAnswer::Datasets(list));
            }
            BootCall::GetLeader { hash } => {
                let answer = match self.state.record(hash) {
                    Some(r) => BootAnswer::Leader { leader: r.leader, incarnation: r.incarnation },
                    None => BootAnswer::Error("unknown dataset".into()),
                };
                send_answer(env, from, id, answer);
            }
            BootCall::LivenessPoll { hash } => {
                if self.state.record(hash).is_none() {
                    send_answer(env, from, id, BootAnswer::Error("unknown dataset".into()));
                } else {
                    self.start_poll(env, hash, Some((from, id)));
                }
            }
            BootCall::RegisterDataset { title, hash, leader, creator } => {
                match self.state.register_dataset(&title, hash, leader, creator) {
                    Ok(u) => {
                        env.metric("dataset_registered", 1.0);
                        self.replicate(env, u, AfterWrite::Reply { to: from, id, answer: BootAnswer::Ack });
                    }
                    Err(e) => send_answer(env, from, id, BootAnswer::Error(e.to_string())),
                }
            }
            BootCall::UpdateLeader { hash, report } => {
                let leader = report.leader;
                match self.state.update_tracker_leader(hash, report) {
                    Ok(Some(u)) => {
                        env.metric("tracker_leader_update", leader.0 as f64);
                        self.dead_since.remove(&hash);
                        self.replicate(env, u, AfterWrite::Reply { to: from, id, answer: BootAnswer::Ack });
                    }
                    Ok(None) => send_answer(env, from, id, BootAnswer::Ack),
                    Err(e) => send_answer(env, from, id, BootAnswer::Error(e.to_string())),
                }
            }
            BootCall::Coin(c) => {
                let now = env.now().0;
                let answer = match self.ledger.as_mut() {
                    None => BootAnswer::Error("no ledger on this server".into()),
                    Some(ledger) => {
                        let res: Result<Posted, LedgerError> = match c {
                            CoinCall::Award { kind, peer, basis, dataset, key } => {
                                ledger.award(kind, peer, basis, dataset, now, Some(key))
                            }
                            CoinCall::Penalize { peer, amount, key } => ledger.penalize(peer, amount, now, Some(key)),
                        };
                        match res {
                            Ok(_) => BootAnswer::Ack,
                            Err(e) => BootAnswer::Error(e.to_string()),
                        }
                    }
                };
                send_answer(env, from, id, answer);
            }
        }
    }

    /// Every server keeps peers issued anywhere in its table, so inductions
    /// through different servers join one overlay.
    fn learn_issued<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, update: &BootUpdate) {
        if let BootUpdate::PeerIssued { node, peer_id } = update {
            self.dht.insert(&mut dht_env!(env), Contact { peer_id: *peer_id, address: *node });
        }
    }

    fn on_forward_reply<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, id: ReqId, answer: BootAnswer) {
        match self.forwards.remove(&id) {
            Some(Forward::Relay { client, id }) => send_answer(env, client, id, answer),
            Some(Forward::Induct { client, id }) => {
                if let BootAnswer::Issued { peer_id } = answer {
                    self.induct(env, client, id, peer_id);
                }
            }
            None => {}
        }
    }

    fn replicate<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, update: BootUpdate, after: AfterWrite) {
        let others: BTreeSet<NodeId> = self.params.bootstrap.iter().copied().filter(|s| *s != self.me).collect();
        if others.is_empty() {
            self.after_write(env, after);
            return;
        }
        let op = self.fresh_id();
        for s in &others {
            env.send(*s, NetMsg::Replicate { op, update: update.clone() });
        }
        self.writes.insert(op, (others, after));
    }

    fn after_write<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, after: AfterWrite) {
        match after {
            AfterWrite::Reply { to, id, answer } => send_answer(env, to, id, answer),
            AfterWrite::Induct { client, id, peer_id } => self.induct(env, client, id, peer_id),
            AfterWrite::Nothing => {}
        }
    }

    /// Looks up the newcomer's own id on its behalf; queried peers learn it.
    fn induct<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, client: NodeId, id: ReqId, peer_id: PeerId) {
        let newcomer = Contact { peer_id, address: client };
        let width = self.dht.config().fan_out;
        let query = self.dht.start_lookup(&mut dht_env!(env), peer_id, width, Some(newcomer));
        self.inductions.insert(query, (client, id, peer_id));
        // Known right away, so peers inducted concurrently can be seeded with it.
        self.dht.insert(&mut dht_env!(env), newcomer);
        self.drain_lookups(env);
    }

    fn drain_lookups<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E) {
        for result in self.dht.take_finished() {
            let Some((client, id, peer_id)) = self.inductions.remove(&result.query) else {
                continue;
            };
            let mut seeds: Vec<Contact> = result.responders;
            for c in self.dht.table().k_closest(peer_id, self.dht.config().fan_out + 1) {
                if !seeds.iter().any(|s| s.peer_id == c.peer_id) {
                    seeds.push(c);
                }
            }
            // One far contact per bucket, so the newcomer's table spans the
            // whole id space even when every near peer joined alongside it.
            let near = self.dht.table().k_closest(peer_id, 2).into_iter().find(|c| c.peer_id != peer_id);
            let deepest = near.map_or(0, |c| bucket_index(c.peer_id ^ peer_id).unwrap_or(0));
            for b in 0..deepest {
                let target = peer_id.random_in_bucket(b, env.rng());
                let far = self.dht.table().k_closest(target, 1);
                if let Some(c) = far.into_iter().find(|c| bucket_index(c.peer_id ^ peer_id) == Ok(b)) {
                    if !seeds.iter().any(|s| s.peer_id == c.peer_id) {
                        seeds.push(c);
                    }
                }
            }
            seeds.retain(|c| c.peer_id != peer_id);
            env.metric("induction_seeds", seeds.len() as f64);
            send_answer(env, client, id, BootAnswer::Registered { peer_id, seeds });
        }
    }

    fn start_poll<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, hash: PeerId, reply_to: Option<(NodeId, ReqId)>) {
        let Some(rec) = self.state.record(hash) else {
            return;
        };
        let mut targets: BTreeSet<NodeId> = rec.members.iter().copied().collect();
        targets.insert(rec.leader);
        let incarnation = rec.incarnation;
        let poll = self.fresh_id();
        for t in &targets {
            env.send(*t, NetMsg::Ping { nonce: poll });
        }
        env.set_timer(self.params.ping_timeout_ms, NetTimer::PingDeadline { poll });
        self.polls.insert(poll, Poll { hash, incarnation, awaiting: targets, live: BTreeSet::new(), reply_to });
    }

    fn finish_poll<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, poll: u64) {
        let Some(p) = self.polls.remove(&poll) else {
            return;
        };
        let live: Vec<NodeId> = p.live.iter().copied().collect();
        match p.reply_to {
            Some((to, id)) => {
                send_answer(env, to, id, BootAnswer::Liveness { live, incarnation: p.incarnation });
            }
            None => {
                if !live.is_empty() {
                    self.dead_since.remove(&p.hash);
                    return;
                }
                let since = *self.dead_since.entry(p.hash).or_insert(env.now());
                if env.now().0 - since.0 >= self.params.lost_grace_ms {
                    if let Some(u) = self.state.mark_lost(p.hash) {
                        env.metric("dataset_lost", 1.0);
                        self.replicate(env, u, AfterWrite::Nothing);
                    }
                }
            }
        }
    }
}

fn send_answer<E: Env<NetMsg, NetTimer>>(env: &mut E, to: NodeId, id: ReqId, answer: BootAnswer) {
    env.send(to, NetMsg::BootResp { id, answer });
}
