//! Fault-tolerant recursive halving/doubling all-reduce.
//!
//! Each logical rank is a Raft group. Its leader drives the exchanges and
//! commits every received segment and every partner confirmation to the
//! group log, so a newly elected leader resumes the collective exactly where
//! the old one stopped and answers retried exchanges without reducing twice.
//!
//! A coordinator node orchestrates steps: it hands each rank its work,
//! serves leader lookups, hosts zero-contribution padding slots, and only
//! tells ranks to apply a result once every included rank has finished the
//! collective. A rank whose group stops answering is excluded; the step then
//! restarts on the remaining ranks and the planner is told what was lost.

pub mod node;
pub mod schedule;
pub mod slot;

pub use node::{Begin, CollMsg, CollTimer, CollectiveNode, Coordinator, JobState, RankCmd, RankReplica, RankStatus};
pub use schedule::{exchange_phase, partner, total_exchanges, ExchangePlan, Phase};
pub use slot::{Element, SlotRun};

use crate::raft::RaftConfig;
use crate::sim::{LatencyModel, NodeId, SimError, Simulation, SimTime};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Debug;

/// What a rank contributes and how it consumes the reduced result.
pub trait RankTask: Clone + Debug {
    type Elem: Element;
    type Work: Clone + Debug + PartialEq;

    /// The rank's vector for `step`. Called on the group leader against the
    /// state left by every earlier applied step.
    fn contribute(&self, step: u64, work: &Self::Work) -> Vec<Self::Elem>;

    /// Simulated time to compute the contribution.
    fn compute_ms(&self, _work: &Self::Work) -> u64 {
        0
    }

    /// Consumes the reduced vector. Runs on every replica, in log order,
    /// against the same state `contribute` saw.
    fn apply(&mut self, step: u64, work: &Self::Work, reduced: &[Self::Elem], total: u64);
}

/// Coordinator-side job plan.
pub trait Planner: Debug {
    type Work: Clone + Debug + PartialEq;

    /// Work for each of `ranks` at `step`, or `None` when the job is done.
    fn plan(&mut self, step: u64, ranks: &[usize]) -> Option<BTreeMap<usize, Self::Work>>;

    /// Work units in `work`, summed into the total every rank sees.
    fn size(&self, work: &Self::Work) -> u64;

    /// `rank` was lost before `step` committed; its work was not counted.
    fn on_lost(&mut self, step: u64, rank: usize, work: &Self::Work);

    /// `step` committed with exactly these contributions.
    fn on_committed(&mut self, step: u64, work: &BTreeMap<usize, Self::Work>);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveConfig {
    pub raft: RaftConfig,
    /// Silence on one exchange before a refresh cycle.
    pub exchange_timeout_ms: u64,
    /// Consecutive lookups finding no live leader before a rank is reported lost.
    pub refresh_cycles: u32,
    pub tick_ms: u64,
    /// A leader that has not reported within this window counts as gone.
    pub leader_window_ms: u64,
    /// Silence after which the coordinator excludes a rank on its own.
    pub lost_after_ms: u64,
    /// Ranks with no leader by this time are excluded before the first step.
    pub start_timeout_ms: u64,
}

impl CollectiveConfig {
    /// Timeouts scaled to the slowest link in the latency model.
    pub fn for_latency(max_base_ms: f64) -> Self {
        let raft = RaftConfig::default();
        let exchange_timeout_ms = (4.0 * max_base_ms).ceil().max(1.0) as u64;
        let leader_window_ms = 2 * raft.election_max_ms + 2 * max_base_ms.ceil() as u64;
        let refresh_cycles = 3;
        CollectiveConfig {
            raft,
            exchange_timeout_ms,
            refresh_cycles,
            tick_ms: raft.heartbeat_ms,
            leader_window_ms,
            lost_after_ms: leader_window_ms + (refresh_cycles as u64 + 1) * exchange_timeout_ms.max(raft.heartbeat_ms),
            start_timeout_ms: 10 * raft.election_max_ms,
        }
    }
}

/// A coordinator plus `ranks` groups of `replicas` nodes each.
///
/// Node 0 is the coordinator; rank `r`'s replica `j` is node `1 + r*replicas + j`.
pub struct Collective<T: RankTask, P: Planner<Work = T::Work>> {
    pub sim: Simulation<CollectiveNode<T, P>>,
    pub ranks: usize,
    pub replicas: usize,
}

impl<T: RankTask, P: Planner<Work = T::Work>> Collective<T, P> {
    /// `tasks[r]` is rank `r`'s initial state, copied onto each replica.
    /// `latency` covers all `1 + ranks*replicas` nodes.
    pub fn build(
        cfg: CollectiveConfig,
        tasks: Vec<T>,
        replicas: usize,
        planner: P,
        vector_len: usize,
        latency: LatencyModel,
        seed: u64,
    ) -> Self {
        let ranks = tasks.len();
        assert!(ranks > 0 && replicas > 0, "need at least one rank and one replica");
        assert_eq!(latency.len(), 1 + ranks * replicas, "latency model size");
        let coordinator = NodeId(0);
        let members: Vec<Vec<NodeId>> =
            (0..ranks).map(|r| (0..replicas).map(|j| NodeId((1 + r * replicas + j) as u32)).collect()).collect();
        let mut nodes = vec![CollectiveNode::Coordinator(Box::new(Coordinator::new(
            cfg,
            planner,
            members.clone(),
            vector_len,
        )))];
        for (r, task) in tasks.into_iter().enumerate() {
            for id in &members[r] {
                nodes.push(CollectiveNode::Replica(Box::new(RankReplica::new(
                    r,
                    *id,
                    members[r].clone(),
                    coordinator,
                    task.clone(),
                    cfg,
                ))));
            }
        }
        Collective { sim: Simulation::new(nodes, latency, seed), ranks, replicas }
    }

    pub fn coordinator(&self) -> &Coordinator<P, T::Elem> {
        self.sim.node(NodeId(0)).as_coordinator().expect("node 0 is the coordinator")
    }

    pub fn members(&self, rank: usize) -> Vec<NodeId> {
        (0..self.replicas).map(|j| NodeId((1 + rank * self.replicas + j) as u32)).collect()
    }

    pub fn replica(&self, node: NodeId) -> &RankReplica<T> {
        self.sim.node(node).as_replica().expect("not a replica")
    }

    /// The online member of `rank` leading in the highest term.
    pub fn leader(&self, rank: usize) -> Option<NodeId> {
        self.members(rank)
            .into_iter()
            .filter(|n| self.sim.is_online(*n) && self.replica(*n).raft().is_leader())
            .max_by_key(|n| self.replica(*n).raft().term())
    }

    /// The newest state of `rank` among its online members.
    pub fn rank_task(&self, rank: usize) -> Option<&T> {
        self.members(rank)
            .into_iter()
            .filter(|n| self.sim.is_online(*n))
            .max_by_key(|n| self.replica(*n).applied_step().map_or(0, |s| s + 1))
            .map(|n| self.replica(n).task())
    }

    /// Runs until the job finishes or aborts, or `deadline` passes.
    pub fn run_until_done(&mut self, deadline: SimTime) -> Result<bool, SimError> {
        self.sim.run_until_cond(deadline, |s| {
            let c = s.node(NodeId(0)).as_coordinator().expect("coordinator");
            matches!(c.state(), JobState::Finished | JobState::Aborted(_))
        })
    }

    /// Runs until some online leader of a rank reaches exchange `k` of the
    /// first attempt of `step`, or `deadline` passes.
    pub fn run_until_exchange(&mut self, step: u64, k: usize, deadline: SimTime) -> Result<bool, SimError> {
        let ranks = self.ranks;
        let replicas = self.replicas;
        self.sim.run_until_cond(deadline, |s| {
            (1..=ranks * replicas).any(|i| {
                let n = NodeId(i as u32);
                s.is_online(n)
                    && s.node(n).as_replica().is_some_and(|r| {
                        r.raft().is_leader() && r.progress().is_some_and(|(st, _, next)| st == step && next >= k)
                    })
            })
        })
    }
}

/// Contributes a fixed vector every step and records each reduced result.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedInput<E> {
    pub input: Vec<E>,
    pub results: Vec<Vec<E>>,
}

impl<E: Element> FixedInput<E> {
    pub fn new(input: Vec<E>) -> Self {
        FixedInput { input, results: Vec::new() }
    }
}

impl<E: Element> RankTask for FixedInput<E> {
    type Elem = E;
    type Work = ();

    fn contribute(&self, _step: u64, _work: &()) -> Vec<E> {
        self.input.clone()
    }

    fn apply(&mut self, _step: u64, _work: &(), reduced: &[E], _total: u64) {
        self.results.push(reduced.to_vec());
    }
}

/// Runs a fixed number of steps, one work unit per rank.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixedRounds {
    pub steps: u64,
    pub lost: Vec<(u64, usize)>,
    pub committed: Vec<(u64, Vec<usize>)>,
}

impl FixedRounds {
    pub fn new(steps: u64) -> Self {
        FixedRounds { steps, ..Default::default() }
    }
}

impl Planner for FixedRounds {
    type Work = ();

    fn plan(&mut self, step: u64, ranks: &[usize]) -> Option<BTreeMap<usize, ()>> {
        (step < self.steps).then(|| ranks.iter().map(|r| (*r, ())).collect())
    }

    fn size(&self, _work: &()) -> u64 {
        1
    }

    fn on_lost(&mut self, step: u64, rank: usize, _work: &()) {
        self.lost.push((step, rank));
    }

    fn on_committed(&mut self, step: u64, work: &BTreeMap<usize, ()>) {
        self.committed.push((step, work.keys().copied().collect()));
    }
}
