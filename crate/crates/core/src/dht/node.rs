use super::id::{Distance, PeerId};
use super::table::{Contact, InsertAttempt, InsertOutcome, RoutingTable};
use crate::sim::{Env, NodeId};
use std::collections::{BTreeMap, BTreeSet};

pub const DEFAULT_FAN_OUT: usize = 3;

#[derive(Clone, Debug)]
pub struct DhtConfig {
    /// Queries per lookup round (and size of returned lists).
    pub fan_out: usize,
    pub bucket_capacity: usize,
    pub round_timeout_ms: u64,
    pub probe_timeout_ms: u64,
}

impl DhtConfig {
    /// Timeouts at four times the largest base latency.
    pub fn for_max_latency(max_base_ms: f64) -> Self {
        let timeout = ((4.0 * max_base_ms).ceil() as u64).max(1);
        DhtConfig {
            fan_out: DEFAULT_FAN_OUT,
            bucket_capacity: super::DEFAULT_BUCKET_CAPACITY,
            round_timeout_ms: timeout,
            probe_timeout_ms: timeout,
        }
    }
}

#[derive(Clone, Debug)]
pub enum DhtMsg {
    FindPeer { query: u64, target: PeerId, want: usize, requester: Contact },
    FindPeerReply { query: u64, responder: Contact, found: Option<Contact>, closest: Vec<Contact> },
    Heartbeat { probe: u64 },
    HeartbeatAck { probe: u64 },
}

#[derive(Clone, Debug)]
pub enum DhtTimer {
    Round { query: u64, round: u32 },
    Probe { probe: u64 },
    /// Deferred insert, so learning never runs inline with a query.
    Learn { contact: Contact },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LookupOutcome {
    Found(Contact),
    NotFound,
    /// Every candidate was unreachable (or there were none).
    NoLiveRoute,
}

#[derive(Clone, Debug)]
pub struct LookupResult {
    pub query: u64,
    pub target: PeerId,
    pub outcome: LookupOutcome,
    pub rounds: u32,
    /// Peers that answered, closest to the target first.
    pub responders: Vec<Contact>,
}

impl LookupResult {
    pub fn found(&self) -> Option<Contact> {
        match &self.outcome {
            LookupOutcome::Found(c) => Some(*c),
            _ => None,
        }
    }
}

#[derive(Debug)]
struct Lookup {
    target: PeerId,
    width: usize,
    requester: Contact,
    known: BTreeMap<(Distance, PeerId), Contact>,
    queried: BTreeSet<PeerId>,
    failed: BTreeSet<PeerId>,
    awaiting: BTreeMap<NodeId, PeerId>,
    responders: Vec<Contact>,
    round: u32,
    round_start: Vec<(Distance, PeerId)>,
    best_returned: Option<Distance>,
}

#[derive(Debug)]
struct Probe {
    bucket: usize,
    occupants: BTreeMap<NodeId, PeerId>,
    acked: BTreeSet<NodeId>,
    candidates: Vec<Contact>,
}

/// One peer's routing table plus its in-flight lookups and liveness probes.
#[derive(Debug)]
pub struct DhtNode {
    me: Contact,
    cfg: DhtConfig,
    table: RoutingTable,
    lookups: BTreeMap<u64, Lookup>,
    probes: BTreeMap<u64, Probe>,
    next_id: u64,
    finished: Vec<LookupResult>,
}

impl DhtNode {
    pub fn new(me: Contact, cfg: DhtConfig) -> Self {
        let table = RoutingTable::with_capacity(me.peer_id, cfg.bucket_capacity);
        DhtNode {
            me,
            cfg,
            table,
            lookups: BTreeMap::new(),
            probes: BTreeMap::new(),
            next_id: 1,
            finished: Vec::new(),
        }
    }

    pub fn me(&self) -> Contact {
        self.me
    }

    pub fn table(&self) -> &RoutingTable {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut RoutingTable {
        &mut self.table
    }

    pub fn config(&self) -> &DhtConfig {
        &self.cfg
    }

    pub fn active_lookups(&self) -> usize {
        self.lookups.len()
    }

    /// Lookups that completed since the last call.
    pub fn take_finished(&mut self) -> Vec<LookupResult> {
        std::mem::take(&mut self.finished)
    }

    /// Iterative lookup for `target` with the configured fan-out.
    pub fn find_node<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E, target: PeerId) -> u64 {
        let width = self.cfg.fan_out;
        self.start_lookup(env, target, width, None)
    }

    /// Lookup querying `width` peers per round. `on_behalf` replaces this node as the
    /// requester that queried peers learn about.
    pub fn start_lookup<E: Env<DhtMsg, DhtTimer>>(
        &mut self,
        env: &mut E,
        target: PeerId,
        width: usize,
        on_behalf: Option<Contact>,
    ) -> u64 {
        let query = self.next_id;
        self.next_id += 1;
        let width = width.max(1);
        let requester = on_behalf.unwrap_or(self.me);
        let mut lookup = Lookup {
            target,
            width,
            requester,
            known: BTreeMap::new(),
            queried: BTreeSet::new(),
            failed: BTreeSet::new(),
            awaiting: BTreeMap::new(),
            responders: Vec::new(),
            round: 0,
            round_start: Vec::new(),
            best_returned: None,
        };
        // Looking up the requester's own id searches for its neighbours, so
        // that id never counts as found.
        let local = if target == requester.peer_id {
            None
        } else {
            self.table.lookup(target).map(|address| Contact { peer_id: target, address })
        };
        if let Some(found) = local {
            self.finish(env, query, lookup, LookupOutcome::Found(found));
            return query;
        }
        for c in self.table.k_closest(target, width) {
            if c.peer_id != requester.peer_id {
                lookup.known.insert((c.peer_id ^ target, c.peer_id), c);
            }
        }
        if lookup.known.is_empty() {
            self.finish(env, query, lookup, LookupOutcome::NoLiveRoute);
            return query;
        }
        self.lookups.insert(query, lookup);
        self.next_round(env, query);
        query
    }

    fn next_round<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E, query: u64) {
        let Some(mut lookup) = self.lookups.remove(&query) else {
            return;
        };
        let batch: Vec<Contact> = lookup
            .known
            .values()
            .filter(|c| !lookup.queried.contains(&c.peer_id))
            .take(lookup.width)
            .copied()
            .collect();
        if batch.is_empty() {
            let outcome = Self::exhausted(&lookup);
            self.finish(env, query, lookup, outcome);
            return;
        }
        lookup.round += 1;
        lookup.round_start = lookup.known.keys().copied().collect();
        lookup.best_returned = None;
        for c in &batch {
            lookup.queried.insert(c.peer_id);
            lookup.awaiting.insert(c.address, c.peer_id);
            env.send(
                c.address,
                DhtMsg::FindPeer {
                    query,
                    target: lookup.target,
                    want: lookup.width,
                    requester: lookup.requester,
                },
            );
        }
        env.set_timer(self.cfg.round_timeout_ms, DhtTimer::Round { query, round: lookup.round });
        self.lookups.insert(query, lookup);
    }

    fn exhausted(lookup: &Lookup) -> LookupOutcome {
        if lookup.responders.is_empty() {
            LookupOutcome::NoLiveRoute
        } else {
            LookupOutcome::NotFound
        }
    }

    fn end_round<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E, query: u64) {
        let Some(lookup) = self.lookups.get(&query) else {
            return;
        };
        let previous_best = lookup
            .round_start
            .iter()
            .filter(|(_, id)| !lookup.failed.contains(id))
            .map(|(d, _)| *d)
            .min();
        let improved = match (lookup.best_returned, previous_best) {
            (Some(new), Some(old)) => new < old,
            (Some(_), None) => true,
            (None, _) => false,
        };
        // A failed best candidate still leaves the next closest ones worth asking.
        let lost_someone = lookup.round_start.iter().any(|(_, id)| lookup.failed.contains(id));
        if improved || (lost_someone && !lookup.known.is_empty()) {
            self.next_round(env, query);
        } else {
            let lookup = self.lookups.remove(&query).expect("present above");
            let outcome = Self::exhausted(&lookup);
            self.finish(env, query, lookup, outcome);
        }
    }

    fn finish<E: Env<DhtMsg, DhtTimer>>(
        &mut self,
        env: &mut E,
        query: u64,
        mut lookup: Lookup,
        outcome: LookupOutcome,
    ) {
        let target = lookup.target;
        lookup.responders.sort_by_key(|c| (c.peer_id ^ target, c.peer_id));
        lookup.responders.dedup_by_key(|c| c.peer_id);
        env.metric("dht_lookup_rounds", lookup.round as f64);
        self.finished.push(LookupResult {
            query,
            target,
            outcome,
            rounds: lookup.round,
            responders: lookup.responders,
        });
    }

    pub fn on_message<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E, from: NodeId, msg: DhtMsg) {
        match msg {
            DhtMsg::FindPeer { query, target, want, requester } => {
                let found = if target == self.me.peer_id {
                    Some(self.me)
                } else {
                    self.table
                        .lookup(target)
                        .map(|address| Contact { peer_id: target, address })
                };
                let closest = self.table.k_closest(target, want.max(1));
                env.send(
                    from,
                    DhtMsg::FindPeerReply { query, responder: self.me, found, closest },
                );
                if requester.peer_id != self.me.peer_id {
                    env.set_timer(0, DhtTimer::Learn { contact: requester });
                }
            }
            DhtMsg::FindPeerReply { query, responder, found, closest } => {
                self.on_reply(env, from, query, responder, found, closest);
            }
            DhtMsg::Heartbeat { probe } => env.send(from, DhtMsg::HeartbeatAck { probe }),
            DhtMsg::HeartbeatAck { probe } => {
                let done = match self.probes.get_mut(&probe) {
                    Some(p) if p.occupants.contains_key(&from) => {
                        p.acked.insert(from);
                        p.acked.len() == p.occupants.len()
                    }
                    _ => false,
                };
                if done {
                    self.resolve_probe(env, probe);
                }
            }
        }
    }

    fn on_reply<E: Env<DhtMsg, DhtTimer>>(
        &mut self,
        env: &mut E,
        from: NodeId,
        query: u64,
        responder: Contact,
        found: Option<Contact>,
        closest: Vec<Contact>,
    ) {
        let me = self.me.peer_id;
        let Some(lookup) = self.lookups.get_mut(&query) else {
            return;
        };
        if lookup.awaiting.remove(&from).is_none() {
            return;
        }
        if responder.peer_id != me {
            env.set_timer(0, DhtTimer::Learn { contact: responder });
        }
        lookup.responders.push(responder);
        let target = lookup.target;
        let hit = found
            .or_else(|| closest.iter().find(|c| c.peer_id == target).copied())
            .filter(|c| c.peer_id != lookup.requester.peer_id);
        if let Some(hit) = hit {
            let lookup = self.lookups.remove(&query).expect("present above");
            self.finish(env, query, lookup, LookupOutcome::Found(hit));
            return;
        }
        for c in closest {
            if c.peer_id == me || c.peer_id == lookup.requester.peer_id || lookup.failed.contains(&c.peer_id) {
                continue;
            }
            let key = (c.peer_id ^ target, c.peer_id);
            if lookup.known.insert(key, c).is_none() {
                lookup.best_returned = Some(lookup.best_returned.map_or(key.0, |b| b.min(key.0)));
            }
        }
        if lookup.awaiting.is_empty() {
            self.end_round(env, query);
        }
    }

    pub fn on_timer<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E, timer: DhtTimer) {
        match timer {
            DhtTimer::Round { query, round } => {
                let Some(lookup) = self.lookups.get_mut(&query) else {
                    return;
                };
                if lookup.round != round || lookup.awaiting.is_empty() {
                    return;
                }
                for (_, peer) in std::mem::take(&mut lookup.awaiting) {
                    lookup.failed.insert(peer);
                    lookup.known.retain(|(_, id), _| *id != peer);
                }
                self.end_round(env, query);
            }
            DhtTimer::Probe { probe } => self.resolve_probe(env, probe),
            DhtTimer::Learn { contact } => {
                self.insert(env, contact);
            }
        }
    }

    /// A bucket-wide lookup for this node's own id, so near neighbours learn
    /// each other.
    pub fn refresh_self<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E) -> u64 {
        let width = self.cfg.bucket_capacity;
        self.start_lookup(env, self.me.peer_id, width, None)
    }

    /// Join-time refresh: a self lookup, then one for a random id in every
    /// bucket farther than the closest known contact. Refresh lookups are
    /// bucket-wide rather than `fan_out` wide. Queried peers learn this node
    /// and it learns them.
    pub fn refresh<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E) -> Vec<u64> {
        let me = self.me.peer_id;
        let width = self.cfg.bucket_capacity;
        let Some(nearest) = self.table.k_closest(me, 1).first().map(|c| c.peer_id) else {
            return Vec::new();
        };
        let deepest = super::bucket_index(me ^ nearest).expect("self is never stored");
        let mut queries = vec![self.refresh_self(env)];
        for b in 0..deepest {
            let target = me.random_in_bucket(b, env.rng());
            queries.push(self.start_lookup(env, target, width, None));
        }
        queries
    }

    /// Insert with asynchronous heartbeat probing of a full bucket.
    pub fn insert<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E, contact: Contact) {
        let Ok(attempt) = self.table.try_insert(contact) else {
            return;
        };
        let InsertAttempt::BucketFull { bucket } = attempt else {
            return;
        };
        if let Some(p) = self.probes.values_mut().find(|p| p.bucket == bucket) {
            if !p.candidates.iter().any(|c| c.peer_id == contact.peer_id) {
                p.candidates.push(contact);
            }
            return;
        }
        let probe = self.next_id;
        self.next_id += 1;
        let occupants: BTreeMap<NodeId, PeerId> = self
            .table
            .bucket(bucket)
            .iter()
            .map(|c| (c.address, c.peer_id))
            .collect();
        for addr in occupants.keys() {
            env.send(*addr, DhtMsg::Heartbeat { probe });
        }
        env.set_timer(self.cfg.probe_timeout_ms, DhtTimer::Probe { probe });
        self.probes.insert(
            probe,
            Probe { bucket, occupants, acked: BTreeSet::new(), candidates: vec![contact] },
        );
    }

    fn resolve_probe<E: Env<DhtMsg, DhtTimer>>(&mut self, env: &mut E, probe: u64) {
        let Some(p) = self.probes.remove(&probe) else {
            return;
        };
        let dead: BTreeSet<PeerId> = p
            .occupants
            .iter()
            .filter(|(addr, _)| !p.acked.contains(addr))
            .map(|(_, id)| *id)
            .collect();
        for candidate in p.candidates {
            if let Ok(InsertOutcome::Replaced { .. }) =
                self.table.resolve_full(candidate, |c| !dead.contains(&c.peer_id))
            {
                env.metric("dht_replaced", 1.0);
            }
        }
    }
}
