//! Runs a scenario: the network phase on one simulation, each training job
//! on its own collective simulation whose metrics are shifted into network
//! time, then the safety monitors and assertions.

use super::pool::{select_machine_pool, Candidate, PoolCriteria};
use super::scenario::{Assertion, FaultKind, JobFaultKind, JobSpec, LatencySpec, Scenario, ScriptOp};
use crate::coin::{vcu, Basis, Coin, LedgerError, RewardKind};
use crate::dht::PeerId;
use crate::network::{CoinCall, Network, NetworkConfig, NetworkError, PeerProfile};
use crate::placement::{EnvSnapshot, Policy, Reinforce, ReinforceConfig};
use crate::raft::RaftNode;
use crate::registry::{dataset_hash, OpReport};
use crate::sim::{
    FaultAction, FaultSchedule, LatencyError, LatencyModel, MetricRecord, MetricsSink, NodeId, SimError, SimTime,
};
use crate::training::{
    committed_batches, train_single, training_collective, ChunkLedger, Dataset, Mlp, TrainingCollective,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Debug;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario is invalid:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpOutcome {
    pub index: usize,
    pub op: &'static str,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum JobStatus {
    Rejected(String),
    Finished,
    Aborted(String),
    TimedOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobOutcome {
    pub name: String,
    pub status: JobStatus,
    pub started_ms: u64,
    pub duration_ms: u64,
    /// Network nodes of each rank group.
    pub ranks: Vec<Vec<NodeId>>,
    /// Samples per step for each rank.
    pub shares: Vec<usize>,
    /// `(step, mean loss)` as applied by the surviving ranks.
    pub losses: Vec<(u64, f64)>,
    /// `(step, commit time)` in network time.
    pub commits: Vec<(u64, u64)>,
    /// `(step, rank, samples)` of every lost contribution.
    pub lost: Vec<(u64, usize, usize)>,
    pub audit: Result<(), String>,
    /// Largest weight gap to a single-machine replay, when one applies.
    pub oracle_gap: Option<f64>,
    pub rewards_paid: Coin,
    pub rewards_expected: Coin,
    /// Reward events posted for the job.
    pub reward_events: usize,
    /// Contributions that should have earned a reward.
    pub rewardable: usize,
    /// Reward events naming a lost contribution.
    pub rewarded_lost: usize,
}

impl JobOutcome {
    fn new(name: &str, started_ms: u64) -> Self {
        JobOutcome {
            name: name.to_string(),
            status: JobStatus::TimedOut,
            started_ms,
            duration_ms: 0,
            ranks: Vec::new(),
            shares: Vec::new(),
            losses: Vec::new(),
            commits: Vec::new(),
            lost: Vec::new(),
            audit: Ok(()),
            oracle_gap: None,
            rewards_paid: Coin::ZERO,
            rewards_expected: Coin::ZERO,
            reward_events: 0,
            rewardable: 0,
            rewarded_lost: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssertionResult {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub name: String,
    pub seed: u64,
    pub end_ms: u64,
    /// The merged metric stream, ordered by time.
    pub metrics: Vec<MetricRecord>,
    pub ops: Vec<OpOutcome>,
    pub jobs: Vec<JobOutcome>,
    pub violations: Vec<String>,
    pub assertions: Vec<AssertionResult>,
    pub ledger_csv: String,
    /// `(node, peer id, balance)` of every peer with an id.
    pub balances: Vec<(NodeId, PeerId, Coin)>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.metrics {
            out.push_str(&serde_json::to_string(r).expect("metric records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn count(&self, metric: &str) -> usize {
        self.metrics.iter().filter(|r| r.metric == metric).count()
    }

    pub fn job(&self, name: &str) -> Option<&JobOutcome> {
        self.jobs.iter().find(|j| j.name == name)
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.random()
}

fn build_network(s: &Scenario) -> Result<Network, HarnessError> {
    let t = &s.topology;
    let n = t.bootstrap_servers + t.peers;
    let latency_seed = derive_seed(s.seed, 1);
    let latency = match t.latency {
        LatencySpec::Planar { min_ms, max_ms, jitter } => LatencyModel::planar(n, min_ms, max_ms, jitter, latency_seed),
        LatencySpec::Uniform { ms } => LatencyModel::uniform(n, ms),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, 2));
    let mut peers: Vec<PeerProfile> = (0..t.peers)
        .map(|i| {
            let c = t.compute;
            let step_ms = if c.max_ms > c.min_ms { rng.random_range(c.min_ms..c.max_ms).round() } else { c.min_ms };
            PeerProfile {
                step_ms,
                coordinator: t.coordinators.contains(&i),
                join_at_ms: i as u64 * t.join_interval_ms,
            }
        })
        .collect();
    for o in &t.step_ms {
        peers[o.peer].step_ms = o.ms;
    }
    let mut cfg = NetworkConfig {
        bootstrap_servers: t.bootstrap_servers,
        peers,
        latency,
        seed: s.seed,
        rates: s.coin.clone(),
        reference_ms: t.compute.reference_ms,
        params: None,
    };
    if let Some(r) = t.tracker_replicas {
        let bootstrap = (0..t.bootstrap_servers as u32).map(NodeId).collect();
        let mut params = crate::network::NetParams::for_latency(bootstrap, cfg.latency.max_base());
        params.replicas = r;
        cfg.params = Some(params);
    }
    Ok(Network::build(cfg)?)
}

fn fault_schedule(s: &Scenario, peers: &[NodeId]) -> FaultSchedule {
    let mut faults: Vec<(SimTime, FaultAction)> = s
        .faults
        .iter()
        .map(|f| {
            let action = match &f.action {
                FaultKind::Crash { peer } => FaultAction::Crash { node: peers[*peer] },
                FaultKind::Restart { peer } => FaultAction::Restart { node: peers[*peer] },
                FaultKind::Partition { a, b } => FaultAction::Partition {
                    a: a.iter().map(|p| peers[*p]).collect(),
                    b: b.iter().map(|p| peers[*p]).collect(),
                },
                FaultKind::Heal => FaultAction::Heal,
            };
            (SimTime(f.at_ms), action)
        })
        .collect();
    faults.sort_by_key(|(t, _)| *t);
    FaultSchedule { entries: faults }
}

fn advance(net: &mut Network, to_ms: u64) -> Result<(), HarnessError> {
    if to_ms > net.now().0 {
        net.run_for(to_ms - net.now().0)?;
    }
    Ok(())
}

enum Item<'a> {
    Step(usize, &'a ScriptOp),
    Job(usize, &'a JobSpec),
}

/// Runs `s` to completion. Assertion failures are reported in the output,
/// not as errors.
pub fn run_scenario(s: &Scenario) -> Result<RunOutput, HarnessError> {
    s.validate().map_err(HarnessError::Invalid)?;
    let mut net = build_network(s)?;
    let peers = net.peer_nodes().to_vec();
    net.load_faults(&fault_schedule(s, &peers))?;

    let mut timeline: Vec<(u64, u8, usize, Item)> = Vec::new();
    for (i, step) in s.script.iter().enumerate() {
        timeline.push((step.at_ms, 0, i, Item::Step(i, &step.op)));
    }
    for (i, job) in s.jobs.iter().enumerate() {
        timeline.push((job.at_ms, 1, i, Item::Job(i, job)));
    }
    timeline.sort_by_key(|(at, kind, i, _)| (*at, *kind, *i));

    let mut extra = MetricsSink::new();
    let mut ops: Vec<OpOutcome> = Vec::new();
    let mut pending: Vec<(usize, &'static str, NodeId, u64)> = Vec::new();
    let mut jobs = Vec::new();
    let mut violations = Vec::new();
    for (at, _, _, item) in &timeline {
        advance(&mut net, *at)?;
        match item {
            Item::Step(i, op) => {
                let fail = |detail: &str| OpOutcome { index: *i, op: op.name(), ok: false, detail: detail.into() };
                match script_op(&mut net, &peers, *i, op) {
                    Started::Pending(node, id) => pending.push((*i, op.name(), node, id)),
                    Started::Done => ops.push(OpOutcome { index: *i, op: op.name(), ok: true, detail: String::new() }),
                    Started::Failed(why) => ops.push(fail(&why)),
                }
            }
            Item::Job(i, job) => {
                let outcome = run_job(&mut net, s, job, *i, &mut extra, &mut violations)?;
                let duration = outcome.duration_ms;
                jobs.push(outcome);
                net.run_for(duration)?;
            }
        }
    }
    advance(&mut net, s.duration_ms)?;
    let end = net.now();

    for (index, op, node, id) in pending {
        let (ok, detail) = match net.peer(node).report(id) {
            Some(OpReport::Failed { what, reason }) => (false, format!("{what}: {reason}")),
            Some(OpReport::Downloaded(r)) if r.reduced => (true, format!("reduced, {} unavailable", r.unavailable.len())),
            Some(_) => (true, String::new()),
            None => (false, "did not finish".into()),
        };
        ops.push(OpOutcome { index, op, ok, detail });
    }
    ops.sort_by_key(|o| o.index);
    for o in ops.iter().filter(|o| !o.ok) {
        extra.record(end, None, "op_failed", o.index as f64);
    }

    violations.extend(network_violations(&net));
    extra.record(end, None, "safety_violations", violations.len() as f64);
    let mut balances = Vec::new();
    for p in &peers {
        if let Some(id) = net.peer(*p).peer_id() {
            let b = net.ledger().balance(&id);
            balances.push((*p, id, b));
            extra.record(end, Some(*p), "coin_balance", b.to_f64());
        }
    }

    let mut metrics: Vec<MetricRecord> = net.sim.metrics().records().to_vec();
    metrics.extend(extra.records().iter().cloned());
    metrics.sort_by_key(|r| r.time);

    let mut out = RunOutput {
        name: s.name.clone(),
        seed: s.seed,
        end_ms: end.0,
        metrics,
        ops,
        jobs,
        violations,
        assertions: Vec::new(),
        ledger_csv: net.ledger().to_csv(),
        balances,
    };
    out.assertions = s.asserts.iter().map(|a| check(a, &out, &net)).collect();
    Ok(out)
}

enum Started {
    Pending(NodeId, u64),
    Done,
    Failed(String),
}

fn script_op(net: &mut Network, peers: &[NodeId], index: usize, op: &ScriptOp) -> Started {
    let offline = || Started::Failed("peer offline".into());
    let pending = |node: NodeId, id: Option<u64>| id.map_or_else(offline, |id| Started::Pending(node, id));
    let award = |net: &mut Network, peer: usize, kind: RewardKind, items: u64| {
        let node = peers[peer];
        let Some(id) = net.peer(node).peer_id() else {
            return Started::Failed("peer not registered".into());
        };
        let call = CoinCall::Award { kind, peer: id, basis: Basis::Items(items), dataset: None, key: format!("script:{index}") };
        net.scripted_award(node, call).map_or_else(offline, |_| Started::Done)
    };
    match op {
        ScriptOp::Create { peer, title } => pending(peers[*peer], net.create_dataset(peers[*peer], title)),
        ScriptOp::Contribute { peer, title, files } => {
            let files = files.iter().map(|f| (f.name.clone(), f.bytes)).collect();
            pending(peers[*peer], net.contribute(peers[*peer], title, files))
        }
        ScriptOp::Download { peer, title } => pending(peers[*peer], net.download(peers[*peer], title)),
        ScriptOp::FindNode { peer, target } => match net.peer(peers[*target]).peer_id() {
            Some(t) => pending(peers[*peer], net.find_node(peers[*peer], t)),
            None => Started::Failed("target not registered".into()),
        },
        ScriptOp::Validate { peer, items } => award(net, *peer, RewardKind::Validation, *items),
        ScriptOp::Annotate { peer, items } => award(net, *peer, RewardKind::Annotation, *items),
        ScriptOp::Penalize { peer, coins } => {
            let node = peers[*peer];
            let Some(id) = net.peer(node).peer_id() else {
                return Started::Failed("peer not registered".into());
            };
            let call = CoinCall::Penalize { peer: id, amount: Coin::from_f64(*coins), key: format!("script:{index}") };
            net.scripted_award(node, call).map_or_else(offline, |_| Started::Done)
        }
        ScriptOp::KillTrackerLeader { title, restart_after_ms } => match net.tracker_leader(dataset_hash(title)) {
            Some(leader) => {
                net.sim.crash(leader);
                if let Some(ms) = restart_after_ms {
                    let at = net.now().after(*ms);
                    net.sim.schedule_fault(at, FaultAction::Restart { node: leader });
                }
                Started::Done
            }
            None => Started::Failed("no live tracker leader".into()),
        },
    }
}

/// Per-rank sample counts from a short REINFORCE run over the pool, and
/// the modelled step latency in ms. The snapshot is in seconds, which keeps
/// rewards in the range the default learning rate is tuned for.
fn place(
    j: &JobSpec,
    net: &Network,
    firsts: &[NodeId],
    rank_ms: &[f64],
    seed: u64,
) -> Result<(Vec<usize>, f64), String> {
    let latency: Vec<Vec<f64>> =
        firsts.iter().map(|a| firsts.iter().map(|b| net.sim.latency().base(*a, *b) / 1000.0).collect()).collect();
    let compute_s: Vec<f64> = rank_ms.iter().map(|ms| ms / 1000.0).collect();
    let capacity = vec![j.placement.capacity.unwrap_or(j.train.global_batch); firsts.len()];
    let snap = EnvSnapshot::new(latency, compute_s, capacity).map_err(|e| e.to_string())?;
    let cfg = ReinforceConfig { anneal_episodes: j.placement.episodes, ..ReinforceConfig::default() };
    let mut agent = Reinforce::new(Policy::new(firsts.len(), seed), cfg, seed);
    agent.train(&snap, j.train.global_batch, j.placement.episodes).map_err(|e| e.to_string())?;
    let shares = agent.greedy(&snap, j.train.global_batch).map_err(|e| e.to_string())?;
    let latency_ms = snap.episode_latency(&shares) * 1000.0;
    Ok((shares, latency_ms))
}

fn run_job(
    net: &mut Network,
    s: &Scenario,
    j: &JobSpec,
    index: usize,
    extra: &mut MetricsSink,
    violations: &mut Vec<String>,
) -> Result<JobOutcome, HarnessError> {
    let start = net.now();
    let coord = net.peer_nodes()[j.coordinator];
    let mut out = JobOutcome::new(&j.name, start.0);
    extra.record(start, Some(coord), "job_started", index as f64);
    let reject = |out: &mut JobOutcome, extra: &mut MetricsSink, why: String| {
        extra.record(start, Some(coord), "job_rejected", index as f64);
        out.status = JobStatus::Rejected(why);
    };

    let coord_id = match net.peer(coord).peer_id() {
        Some(id) if net.sim.is_online(coord) => id,
        _ => {
            reject(&mut out, extra, "coordinator is offline or unregistered".into());
            return Ok(out);
        }
    };
    if !net.server(0).state.list_datasets().iter().any(|(t, ..)| *t == j.dataset) {
        reject(&mut out, extra, format!("dataset {:?} is not registered", j.dataset));
        return Ok(out);
    }
    let candidates: Vec<Candidate> = net
        .peer_nodes()
        .iter()
        .filter(|p| **p != coord && net.sim.is_online(**p) && !net.peer(**p).profile().coordinator)
        .filter_map(|p| {
            let peer = net.peer(*p);
            peer.peer_id().map(|id| Candidate {
                node: *p,
                peer_id: id,
                step_ms: peer.profile().step_ms,
                latency_ms: net.sim.latency().base(coord, *p),
            })
        })
        .collect();
    let criteria = PoolCriteria {
        weights: j.pool,
        min_machines: j.replicas,
        max_machines: j.max_machines,
        reference_ms: s.topology.compute.reference_ms,
        steps: j.train.max_steps,
    };
    let mut pool = match select_machine_pool(coord_id, j.budget, &candidates, &criteria) {
        Ok(p) => p,
        Err(e) => {
            reject(&mut out, extra, e.to_string());
            return Ok(out);
        }
    };
    let spend = net.ledger_mut().spend(coord_id, Coin::from_f64(j.budget), start.0, Some(format!("job:{}:spend", j.name)));
    if let Err(e @ LedgerError::Insufficient { .. }) = spend {
        reject(&mut out, extra, e.to_string());
        return Ok(out);
    }

    // Rank r takes every ranks-th machine from position r, mixing scores.
    let ranks = pool.len() / j.replicas;
    pool.truncate(ranks * j.replicas);
    let groups: Vec<Vec<NodeId>> =
        (0..ranks).map(|r| (0..j.replicas).map(|k| pool[r + k * ranks].candidate.node).collect()).collect();
    for sel in &pool {
        extra.record(start, Some(sel.candidate.node), "pool_member", sel.score);
    }
    let rank_ms: Vec<f64> =
        groups.iter().map(|g| g.iter().map(|n| net.peer(*n).profile().step_ms).fold(0.0, f64::max)).collect();
    out.ranks = groups.clone();

    let job_seed = derive_seed(s.seed, 100 + index as u64);
    let shares = if j.placement.enabled {
        let firsts: Vec<NodeId> = groups.iter().map(|g| g[0]).collect();
        match place(j, net, &firsts, &rank_ms, job_seed) {
            Ok((shares, latency)) => {
                extra.record(start, Some(coord), "placement_latency", latency);
                shares
            }
            Err(why) => {
                reject(&mut out, extra, format!("placement failed: {why}"));
                return Ok(out);
            }
        }
    } else {
        let b = j.train.global_batch;
        (0..ranks).map(|r| b / ranks + usize::from(r < b % ranks)).collect()
    };
    for (g, share) in groups.iter().zip(&shares) {
        extra.record(start, Some(g[0]), "rank_share", *share as f64);
    }
    out.shares = shares.clone();

    let model = Mlp::new(j.model.clone());
    let data = Arc::new(Dataset::synthetic(&model, j.samples, j.noise, job_seed ^ 1));
    let init = model.init(job_seed ^ 2);
    let cfg = j.train.resolved();
    let ledger = ChunkLedger::new(j.samples, shares, j.train.max_steps, job_seed ^ 3);
    let order: Vec<NodeId> = std::iter::once(coord).chain(groups.iter().flatten().copied()).collect();
    let latency = LatencyModel::new(net.sim.latency().submatrix(&order), net.sim.latency().jitter(), job_seed ^ 4)?;
    let mut coll = training_collective(&model, data.clone(), &cfg, &init, ledger, &rank_ms, j.replicas, latency, job_seed);

    let deadline = SimTime(j.deadline_ms);
    let mut faults: Vec<_> = j.faults.iter().filter(|f| f.rank < ranks).collect();
    faults.sort_by_key(|f| (f.step, f.exchange));
    for f in faults {
        if !coll.run_until_exchange(f.step, f.exchange, deadline)? {
            let now = coll.sim.now();
            coll.sim.metrics_mut().record(now, None, "job_fault_skipped", f.rank as f64);
            continue;
        }
        let leader = coll.leader(f.rank);
        let online: Vec<NodeId> = coll.members(f.rank).into_iter().filter(|n| coll.sim.is_online(*n)).collect();
        let (targets, restart) = match &f.kind {
            JobFaultKind::KillLeader { restart_after_ms } => (leader.into_iter().collect(), *restart_after_ms),
            JobFaultKind::KillFollower { restart_after_ms } => {
                (online.iter().copied().filter(|n| Some(*n) != leader).take(1).collect(), *restart_after_ms)
            }
            JobFaultKind::KillRank => (online, None),
        };
        let now = coll.sim.now();
        for n in targets {
            coll.sim.crash(n);
            coll.sim.metrics_mut().record(now, Some(n), "job_fault_crash", f.rank as f64);
            if let Some(ms) = restart {
                coll.sim.schedule_fault(now.after(ms), FaultAction::Restart { node: n });
            }
        }
    }
    coll.run_until_done(deadline)?;
    // followers apply the final commit shortly after the coordinator finishes
    coll.sim.run_for(1_000)?;
    out.duration_ms = coll.sim.now().0;
    out.status = match coll.coordinator().state() {
        crate::allreduce::JobState::Finished => JobStatus::Finished,
        crate::allreduce::JobState::Aborted(why) => JobStatus::Aborted(why.clone()),
        _ => JobStatus::TimedOut,
    };

    violations.extend(collective_violations(&coll).into_iter().map(|v| format!("job {}: {v}", j.name)));
    let planner = &coll.coordinator().planner;
    out.audit = planner.audit();
    if let Err(e) = &out.audit {
        violations.push(format!("job {}: chunk ledger: {e}", j.name));
    }

    // Collective metrics in network time and addresses.
    let mut commit_ms: BTreeMap<u64, u64> = BTreeMap::new();
    let mut leaders: BTreeMap<usize, Vec<(u64, NodeId)>> = BTreeMap::new();
    extra.set_offset(start.0);
    for r in coll.sim.metrics().records() {
        if r.metric == "step_committed" {
            commit_ms.entry(r.value as u64).or_insert(r.time);
        }
        if let (Some(n), "raft_leader") = (r.node, r.metric.as_str()) {
            if n > 0 {
                leaders.entry((n as usize - 1) / j.replicas).or_default().push((r.time, order[n as usize]));
            }
        }
        extra.record(SimTime(r.time), r.node.map(|n| order[n as usize]), &r.metric, r.value);
    }
    let survivor = coll.coordinator().included().iter().next().copied();
    out.losses = survivor.and_then(|r| coll.rank_task(r)).map(|t| t.losses.clone()).unwrap_or_default();
    let mut prev = 0;
    for t in commit_ms.values() {
        extra.record(SimTime(*t), Some(coord), "step_latency_ms", (t - prev) as f64);
        prev = *t;
    }
    for (step, loss) in &out.losses {
        if let Some(t) = commit_ms.get(step) {
            extra.record(SimTime(*t), Some(coord), "train_loss", *loss);
        }
    }
    let end = coll.sim.now();
    for (step, rank, chunk) in &planner.lost {
        out.lost.push((*step, *rank, chunk.indices.len()));
        extra.record(end, Some(groups[*rank][0]), "deferred_chunk", chunk.indices.len() as f64);
    }
    extra.set_offset(0);
    out.commits = commit_ms.iter().map(|(s, t)| (*s, start.0 + t)).collect();

    if cfg.compression_k.is_none() {
        let oracle = train_single(&model, &data, &cfg, &init, &committed_batches(planner));
        let last = commit_ms.keys().next_back().copied();
        out.oracle_gap = coll
            .coordinator()
            .included()
            .iter()
            .flat_map(|r| coll.members(*r))
            .filter(|n| coll.sim.is_online(*n) && coll.replica(*n).applied_step() == last)
            .map(|n| coll.replica(n).task().opt.weights.max_abs_diff(&oracle.weights))
            .reduce(f64::max);
    }

    // Training rewards: one per committed contribution, paid to the
    // machine leading the rank when the step committed.
    let reference_ms = s.topology.compute.reference_ms;
    let trained = planner.trained.clone();
    let lost_keys: Vec<String> = planner.lost.iter().map(|(st, r, _)| format!("train:{}:{st}:{r}", j.name)).collect();
    for t in &trained {
        let samples = t.chunk.indices.len();
        if samples == 0 {
            continue;
        }
        out.rewardable += 1;
        let at = commit_ms.get(&t.step).copied().unwrap_or(0);
        let machine = leaders
            .get(&t.rank)
            .and_then(|l| l.iter().rev().find(|(time, _)| *time <= at))
            .map_or(groups[t.rank][0], |(_, n)| *n);
        let Some(id) = net.peer(machine).peer_id() else { continue };
        let v = vcu(reference_ms, net.peer(machine).profile().step_ms, samples as f64);
        let basis = Basis::Vcu(v);
        let key = format!("train:{}:{}:{}", j.name, t.step, t.rank);
        let ledger = net.ledger_mut();
        let amount = ledger.rate_amount(RewardKind::TrainingStep, basis).expect("training basis is VCU");
        out.rewards_expected = out.rewards_expected + amount;
        if ledger.award(RewardKind::TrainingStep, id, basis, None, start.0 + at, Some(key)).is_ok() {
            extra.record(SimTime(start.0 + at), Some(machine), "training_reward", amount.to_f64());
        }
    }
    let prefix = format!("train:{}:", j.name);
    for e in net.ledger().events() {
        if let Some(k) = e.key.as_deref().filter(|k| k.starts_with(&prefix)) {
            out.reward_events += 1;
            out.rewards_paid = out.rewards_paid + e.amount;
            if lost_keys.iter().any(|l| l == k) {
                out.rewarded_lost += 1;
            }
        }
    }
    Ok(out)
}

/// Committed entries agree between every pair of logs.
fn committed_prefix_violations<C: Clone + PartialEq + Debug>(group: &str, nodes: &[(NodeId, &RaftNode<C>)]) -> Vec<String> {
    let mut out = Vec::new();
    for (i, (a, ra)) in nodes.iter().enumerate() {
        for (b, rb) in &nodes[i + 1..] {
            let upto = ra.commit_index().min(rb.commit_index());
            if let Some(idx) = (1..=upto).find(|k| match (ra.entry(*k), rb.entry(*k)) {
                (Some(x), Some(y)) => x != y,
                _ => false,
            }) {
                out.push(format!("{group}: {a} and {b} committed different entries at index {idx}"));
            }
        }
    }
    out
}

/// Election safety per rank group, committed-log agreement, and identical
/// state on replicas that applied the same step.
pub fn collective_violations(c: &TrainingCollective) -> Vec<String> {
    let mut out = Vec::new();
    let mut leaders: BTreeMap<(usize, u64), u32> = BTreeMap::new();
    for r in c.sim.metrics().named("raft_leader") {
        let Some(n) = r.node.filter(|n| *n > 0) else { continue };
        let rank = (n as usize - 1) / c.replicas;
        if let Some(prev) = leaders.insert((rank, r.value as u64), n) {
            if prev != n {
                out.push(format!("rank {rank}: term {} has leaders n{prev} and n{n}", r.value));
            }
        }
    }
    for rank in 0..c.ranks {
        let members: Vec<NodeId> = c.members(rank);
        let rafts: Vec<(NodeId, &RaftNode<_>)> = members.iter().map(|n| (*n, c.replica(*n).raft())).collect();
        out.extend(committed_prefix_violations(&format!("rank {rank}"), &rafts));
        let online: Vec<NodeId> = members.into_iter().filter(|n| c.sim.is_online(*n)).collect();
        for (i, a) in online.iter().enumerate() {
            for b in &online[i + 1..] {
                let (ra, rb) = (c.replica(*a), c.replica(*b));
                if ra.applied_step().is_some()
                    && ra.applied_step() == rb.applied_step()
                    && (ra.task().opt.weights != rb.task().opt.weights || ra.task().residual != rb.task().residual)
                {
                    out.push(format!("rank {rank}: {a} and {b} applied the same steps but hold different state"));
                }
            }
        }
    }
    out
}

/// Ledger replay, tracker-group log agreement and routing-table placement.
pub fn network_violations(net: &Network) -> Vec<String> {
    let mut out = Vec::new();
    if let Err(e) = net.ledger().audit() {
        out.push(format!("ledger: {e}"));
    }
    let mut groups: BTreeMap<(PeerId, u32), Vec<(NodeId, &RaftNode<_>)>> = BTreeMap::new();
    for p in net.peer_nodes() {
        if !net.sim.is_online(*p) {
            continue;
        }
        let peer = net.peer(*p);
        for (hash, replica) in peer.trackers() {
            groups.entry((*hash, replica.incarnation())).or_default().push((*p, replica.raft()));
        }
        if let Some(dht) = peer.dht() {
            if let Err(e) = dht.table().audit() {
                out.push(format!("routing table of {p}: {e}"));
            }
        }
    }
    for ((hash, inc), nodes) in &groups {
        out.extend(committed_prefix_violations(&format!("tracker {hash} incarnation {inc}"), nodes));
    }
    out
}

fn check(a: &Assertion, out: &RunOutput, net: &Network) -> AssertionResult {
    let job = |name: &str| out.job(name);
    let (check, result): (String, Result<(), String>) = match a {
        Assertion::OpsSucceeded => {
            let failed: Vec<String> =
                out.ops.iter().filter(|o| !o.ok).map(|o| format!("script[{}] {}: {}", o.index, o.op, o.detail)).collect();
            ("ops_succeeded".into(), if failed.is_empty() { Ok(()) } else { Err(failed.join("; ")) })
        }
        Assertion::NoSafetyViolations => (
            "no_safety_violations".into(),
            if out.violations.is_empty() { Ok(()) } else { Err(out.violations.join("; ")) },
        ),
        Assertion::LedgerAudit => ("ledger_audit".into(), net.ledger().audit()),
        Assertion::MinCount { metric, count } => {
            let n = out.count(metric);
            (format!("min_count {metric} >= {count}"), if n >= *count { Ok(()) } else { Err(format!("saw {n}")) })
        }
        Assertion::MaxCount { metric, count } => {
            let n = out.count(metric);
            (format!("max_count {metric} <= {count}"), if n <= *count { Ok(()) } else { Err(format!("saw {n}")) })
        }
        Assertion::JobCompleted { job: name } => (
            format!("job_completed {name}"),
            match job(name).map(|j| &j.status) {
                Some(JobStatus::Finished) => Ok(()),
                other => Err(format!("status {other:?}")),
            },
        ),
        Assertion::JobRejected { job: name } => (
            format!("job_rejected {name}"),
            match job(name).map(|j| &j.status) {
                Some(JobStatus::Rejected(_)) => Ok(()),
                other => Err(format!("status {other:?}")),
            },
        ),
        Assertion::LossDecreased { job: name } => {
            let losses: Vec<f64> = job(name).map(|j| j.losses.iter().map(|(_, l)| *l).collect()).unwrap_or_default();
            let q = losses.len() / 4;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let r = if q == 0 {
                Err(format!("only {} loss values", losses.len()))
            } else {
                let (first, last) = (mean(&losses[..q]), mean(&losses[losses.len() - q..]));
                if last < first {
                    Ok(())
                } else {
                    Err(format!("first quarter {first}, last quarter {last}"))
                }
            };
            (format!("loss_decreased {name}"), r)
        }
        Assertion::OracleMatch { job: name, tolerance } => (
            format!("oracle_match {name} <= {tolerance:e}"),
            match job(name).and_then(|j| j.oracle_gap) {
                Some(g) if g <= *tolerance => Ok(()),
                Some(g) => Err(format!("gap {g:e}")),
                None => Err("no comparable replica".into()),
            },
        ),
        Assertion::ChunkAudit { job: name } => (
            format!("chunk_audit {name}"),
            match job(name) {
                Some(j) if matches!(j.status, JobStatus::Rejected(_)) => Err("job was rejected".into()),
                Some(j) => j.audit.clone(),
                None => Err("job did not run".into()),
            },
        ),
        Assertion::RewardsGated { job: name } => (
            format!("rewards_gated {name}"),
            match job(name) {
                Some(j) if matches!(j.status, JobStatus::Rejected(_)) => Err("job was rejected".into()),
                Some(j) if j.rewarded_lost > 0 => Err(format!("{} lost contributions were paid", j.rewarded_lost)),
                Some(j) if j.reward_events != j.rewardable => {
                    Err(format!("{} rewards for {} committed contributions", j.reward_events, j.rewardable))
                }
                Some(j) if j.rewards_paid != j.rewards_expected => {
                    Err(format!("paid {} but committed VCU is worth {}", j.rewards_paid, j.rewards_expected))
                }
                Some(_) => Ok(()),
                None => Err("job did not run".into()),
            },
        ),
        Assertion::DatasetAvailable { title } => (
            format!("dataset_available {title}"),
            match net.tracker_leader(dataset_hash(title)) {
                Some(l) if net.peer(l).tracker(&dataset_hash(title)).and_then(|r| r.meta()).is_some() => Ok(()),
                _ => Err("no live tracker leader holds its metadata".into()),
            },
        ),
    };
    match result {
        Ok(()) => AssertionResult { check, passed: true, detail: String::new() },
        Err(detail) => AssertionResult { check, passed: false, detail },
    }
}
