//! A standalone Raft-replicated log of integers, plus the chaos driver and
//! safety monitors used to exercise it.

use super::{LogEntry, LogIndex, Payload, RaftConfig, RaftMsg, RaftNode, RaftTimer, Role, Term};
use crate::sim::{Ctx, FaultAction, LatencyModel, NodeId, Process, SimError, Simulation};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// One replica. `applied` accumulates across restarts so monitors can see
/// every application the node ever made.
pub struct ClusterNode {
    pub raft: RaftNode<u64>,
    pub applied: Vec<LogEntry<u64>>,
}

impl ClusterNode {
    pub fn new(id: NodeId, members: Vec<NodeId>, config: RaftConfig) -> Self {
        ClusterNode { raft: RaftNode::new(id, members, config), applied: Vec::new() }
    }

    fn apply(&mut self) {
        self.applied.extend(self.raft.drain_committed());
    }
}

impl Process for ClusterNode {
    type Msg = RaftMsg<u64>;
    type Timer = RaftTimer;

    fn on_start(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>) {
        self.raft.start(ctx);
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>, from: NodeId, msg: Self::Msg) {
        self.raft.on_message(ctx, from, msg);
        self.apply();
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>, timer: Self::Timer) {
        self.raft.on_timer(ctx, timer);
        self.apply();
    }

    fn on_crash(&mut self) {
        self.raft.crash();
    }

    fn on_restart(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>) {
        self.raft.start(ctx);
    }
}

pub fn build_cluster(n: usize, latency: LatencyModel, seed: u64) -> Simulation<ClusterNode> {
    let members: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
    let nodes = members
        .iter()
        .map(|id| ClusterNode::new(*id, members.clone(), RaftConfig::default()))
        .collect();
    Simulation::new(nodes, latency, seed)
}

/// Proposes `cmd` on whichever online node currently believes it leads.
pub fn propose_anywhere(sim: &mut Simulation<ClusterNode>, cmd: u64) -> Option<LogIndex> {
    let leader = sim
        .online_nodes()
        .into_iter()
        .filter(|n| sim.node(*n).raft.is_leader())
        .max_by_key(|n| sim.node(*n).raft.term())?;
    sim.with_node(leader, |node, ctx| node.raft.propose(ctx, cmd).ok().map(|(i, _)| i))
        .flatten()
}

/// A leader acknowledged by a majority of the full membership, all online.
pub fn stable_leader(sim: &Simulation<ClusterNode>) -> Option<NodeId> {
    let all: Vec<NodeId> = (0..sim.len() as u32).map(NodeId).collect();
    let majority = all.len() / 2 + 1;
    let online = sim.online_nodes();
    online.iter().copied().find(|l| {
        let raft = &sim.node(*l).raft;
        if !raft.is_leader() {
            return false;
        }
        let followers = online
            .iter()
            .filter(|n| {
                let r = &sim.node(**n).raft;
                r.term() == raft.term() && r.leader_hint() == Some(*l) && !sim.separated(**n, *l)
            })
            .count();
        followers >= majority
    })
}

/// Checks the Raft safety properties over a finished (or paused) run.
pub fn check_safety(sim: &Simulation<ClusterNode>) -> Vec<String> {
    let mut violations = Vec::new();

    // election safety: at most one leader per term, over the whole trace
    let mut leaders: BTreeMap<u64, u32> = BTreeMap::new();
    for r in sim.metrics().named("raft_leader") {
        let term = r.value as u64;
        let node = r.node.expect("leader metric carries node");
        if let Some(prev) = leaders.insert(term, node) {
            if prev != node {
                violations.push(format!("election safety: term {term} has leaders n{prev} and n{node}"));
            }
        }
    }

    // log matching
    let logs: Vec<&[LogEntry<u64>]> = sim.nodes().map(|(_, n)| n.raft.log()).collect();
    for a in 0..logs.len() {
        for b in a + 1..logs.len() {
            let common = logs[a].len().min(logs[b].len());
            if let Some(last_match) = (0..common).rev().find(|&i| logs[a][i].term == logs[b][i].term) {
                if logs[a][..=last_match] != logs[b][..=last_match] {
                    violations.push(format!("log matching: n{a} and n{b} diverge before index {}", last_match + 1));
                }
            }
        }
    }

    // state-machine safety: one payload per applied index
    let mut applied: BTreeMap<LogIndex, (Term, &Payload<u64>)> = BTreeMap::new();
    for (id, node) in sim.nodes() {
        for e in &node.applied {
            if let Some((t, p)) = applied.get(&e.index) {
                if *t != e.term || *p != &e.payload {
                    violations.push(format!("state-machine safety: {id} applied a different entry at {}", e.index));
                }
            } else {
                applied.insert(e.index, (e.term, &e.payload));
            }
        }
    }

    // leader completeness: the newest leader holds every applied entry
    let newest = sim
        .nodes()
        .filter(|(id, n)| n.raft.role() == Role::Leader && sim.is_online(*id))
        .max_by_key(|(_, n)| n.raft.term());
    if let Some((id, leader)) = newest {
        let is_current = sim.nodes().all(|(_, n)| n.raft.term() <= leader.raft.term());
        if is_current {
            for (index, (term, payload)) in &applied {
                match leader.raft.entry(*index) {
                    Some(e) if e.term == *term && &e.payload == *payload => {}
                    _ => violations.push(format!("leader completeness: {id} lacks committed entry {index}")),
                }
            }
        }
    }
    violations
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChaosReport {
    pub seed: u64,
    pub events: u64,
    pub elections: usize,
    pub committed: usize,
    pub violations: Vec<String>,
    /// Time from stabilization (heal, at most two crashed, leader killed) to
    /// a majority-acknowledged leader; `None` if none emerged before the deadline.
    pub recovery_ms: Option<u64>,
}

/// Random crashes, restarts, partitions and heals over `event_budget` events
/// on a `nodes`-member cluster, followed by a stabilization phase.
pub fn chaos_run(seed: u64, nodes: usize, event_budget: u64) -> Result<ChaosReport, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut base = vec![vec![0.0; nodes]; nodes];
    for i in 0..nodes {
        for j in i + 1..nodes {
            let l = rng.random_range(2.0..25.0f64).round();
            base[i][j] = l;
            base[j][i] = l;
        }
    }
    let latency = LatencyModel::new(base, 0.2, seed).expect("generated matrix is valid");
    let mut sim = build_cluster(nodes, latency, seed);
    let ids: Vec<NodeId> = (0..nodes as u32).map(NodeId).collect();
    let mut next_cmd = 1u64;

    while sim.stats().events < event_budget {
        let gap = rng.random_range(20..400u64);
        let target = sim.now().after(gap);
        // stop inside the gap if the budget runs out
        let remaining = event_budget - sim.stats().events;
        let before = sim.stats().events;
        sim.run_until_cond(target, |s| s.stats().events - before >= remaining)?;
        if sim.stats().events >= event_budget {
            break;
        }
        let roll = rng.random_range(0..100);
        match roll {
            0..=49 => {
                propose_anywhere(&mut sim, next_cmd);
                next_cmd += 1;
            }
            50..=64 => {
                let online = sim.online_nodes();
                if let Some(n) = online.choose(&mut rng) {
                    sim.crash(*n);
                }
            }
            65..=79 => {
                let crashed: Vec<NodeId> = ids.iter().copied().filter(|n| !sim.is_online(*n)).collect();
                if let Some(n) = crashed.choose(&mut rng) {
                    sim.restart(*n)?;
                }
            }
            80..=89 => {
                let mut shuffled = ids.clone();
                shuffled.shuffle(&mut rng);
                let cut = rng.random_range(1..nodes);
                let (a, b) = shuffled.split_at(cut);
                sim.apply_fault(FaultAction::Partition { a: a.to_vec(), b: b.to_vec() })?;
            }
            _ => sim.apply_fault(FaultAction::Heal)?,
        }
    }
    let events = sim.stats().events;

    // stabilize: heal, leave at most one node down, then kill the leader
    sim.apply_fault(FaultAction::Heal)?;
    let mut crashed: Vec<NodeId> = ids.iter().copied().filter(|n| !sim.is_online(*n)).collect();
    crashed.shuffle(&mut rng);
    while crashed.len() > 1 {
        let n = crashed.pop().expect("non-empty");
        sim.restart(n)?;
    }
    sim.run_for(1_000)?;
    if let Some(l) = stable_leader(&sim) {
        sim.crash(l);
    }
    let start = sim.now();
    let deadline = start.after(10 * RaftConfig::default().election_max_ms);
    let recovered = sim.run_until_cond(deadline, |s| stable_leader(s).is_some())?;
    let recovery_ms = recovered.then(|| sim.now().0 - start.0);

    // let the survivors replicate, then audit
    for _ in 0..5 {
        propose_anywhere(&mut sim, next_cmd);
        next_cmd += 1;
        sim.run_for(200)?;
    }
    let violations = check_safety(&sim);
    let committed = sim.nodes().map(|(_, n)| n.raft.commit_index() as usize).max().unwrap_or(0);
    Ok(ChaosReport {
        seed,
        events,
        elections: sim.metrics().count("raft_leader"),
        committed,
        violations,
        recovery_ms,
    })
}
