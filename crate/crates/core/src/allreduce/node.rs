use super::slot::{Element, SlotRun};
use super::{CollectiveConfig, Planner, RankTask};
use crate::raft::{Payload, RaftMsg, RaftNode, RaftTimer, Term};
use crate::sim::{Ctx, Env, NodeId, Process, SimTime};
use std::collections::{BTreeMap, BTreeSet};

/// One step's assignment to a rank, as committed in the rank's log.
#[derive(Clone, Debug, PartialEq)]
pub struct Begin<W> {
    pub step: u64,
    pub attempt: u64,
    /// Slot to rank; `None` is a zero-contribution slot hosted by the coordinator.
    pub layout: Vec<Option<usize>>,
    pub work: W,
    /// Work units summed over every included rank.
    pub total: u64,
}

impl<W> Begin<W> {
    pub fn slot_of(&self, rank: usize) -> Option<usize> {
        self.layout.iter().position(|r| *r == Some(rank))
    }
}

/// Rank-group log commands.
#[derive(Clone, Debug, PartialEq)]
pub enum RankCmd<E, W> {
    Begin(Begin<W>),
    Input { step: u64, vector: Vec<E> },
    Received { attempt: u64, k: usize, segment: Vec<E> },
    Acked { attempt: u64, k: usize },
    Apply { step: u64, attempt: u64 },
}

/// What a rank leader last reported to the coordinator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RankStatus {
    /// `(step, attempt, done)` of the current run.
    pub running: Option<(u64, u64, bool)>,
    pub applied: Option<u64>,
}

#[derive(Clone, Debug)]
pub enum CollMsg<E, W> {
    Raft { rank: usize, msg: RaftMsg<RankCmd<E, W>> },
    Begin { begin: Begin<W>, hints: BTreeMap<usize, NodeId> },
    Exchange { attempt: u64, k: usize, from_slot: usize, to_slot: usize, segment: Vec<E> },
    ExchangeAck { attempt: u64, k: usize, from_slot: usize, to_slot: usize },
    LeaderQuery { rank: usize },
    LeaderInfo { rank: usize, leader: Option<NodeId> },
    Beat { rank: usize, term: Term, status: RankStatus },
    Commit { step: u64, attempt: u64 },
    RankLost { rank: usize, attempt: u64 },
}

#[derive(Clone, Debug)]
pub enum CollTimer {
    Raft(RaftTimer),
    Compute { step: u64 },
    Tick,
}

macro_rules! rank_env {
    ($env:expr, $rank:expr) => {{
        let rank = $rank;
        $env.scoped(move |msg| CollMsg::Raft { rank, msg }, CollTimer::Raft)
    }};
}

/// Leader-side retry state for the current exchange.
#[derive(Clone, Debug)]
struct Drive {
    key: (u64, usize),
    since: SimTime,
    none_cycles: u32,
}

#[derive(Clone, Debug)]
struct Run<E, W> {
    begin: Begin<W>,
    slot: usize,
    slots: Option<SlotRun<E>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Proposal {
    Begin(u64),
    Input(u64),
    Received(u64, usize),
    Acked(u64, usize),
    Apply(u64),
}

/// One replica of a rank group.
#[derive(Debug)]
pub struct RankReplica<T: RankTask> {
    pub rank: usize,
    cfg: CollectiveConfig,
    coordinator: NodeId,
    raft: RaftNode<RankCmd<T::Elem, T::Work>>,
    initial: T,
    // Replicated state, rebuilt from the log after a restart.
    task: T,
    input: Option<(u64, Vec<T::Elem>)>,
    run: Option<Run<T::Elem, T::Work>>,
    applied: Option<u64>,
    // Leader-only, volatile.
    led: Option<Term>,
    proposed: BTreeSet<Proposal>,
    inbox: BTreeMap<(u64, usize), Vec<T::Elem>>,
    addresses: BTreeMap<usize, NodeId>,
    pending_begin: Option<Begin<T::Work>>,
    pending_commit: Option<(u64, u64)>,
    computing: Option<u64>,
    drive: Option<Drive>,
    reported: Option<RankStatus>,
}

impl<T: RankTask> RankReplica<T> {
    pub fn new(rank: usize, me: NodeId, members: Vec<NodeId>, coordinator: NodeId, task: T, cfg: CollectiveConfig) -> Self {
        RankReplica {
            rank,
            raft: RaftNode::new(me, members, cfg.raft),
            cfg,
            coordinator,
            initial: task.clone(),
            task,
            input: None,
            run: None,
            applied: None,
            led: None,
            proposed: BTreeSet::new(),
            inbox: BTreeMap::new(),
            addresses: BTreeMap::new(),
            pending_begin: None,
            pending_commit: None,
            computing: None,
            drive: None,
            reported: None,
        }
    }

    pub fn raft(&self) -> &RaftNode<RankCmd<T::Elem, T::Work>> {
        &self.raft
    }

    /// Rank state as of the last applied step.
    pub fn task(&self) -> &T {
        &self.task
    }

    pub fn applied_step(&self) -> Option<u64> {
        self.applied
    }

    /// `(step, attempt, next exchange)` of the current run, once its input is in.
    pub fn progress(&self) -> Option<(u64, u64, usize)> {
        let run = self.run.as_ref()?;
        run.slots.as_ref().map(|s| (run.begin.step, run.begin.attempt, s.next))
    }

    pub fn status(&self) -> RankStatus {
        RankStatus {
            running: self.run.as_ref().map(|r| {
                (r.begin.step, r.begin.attempt, r.slots.as_ref().is_some_and(|s| s.is_done()))
            }),
            applied: self.applied,
        }
    }

    fn reset_volatile(&mut self) {
        self.led = None;
        self.proposed.clear();
        self.inbox.clear();
        self.pending_begin = None;
        self.pending_commit = None;
        self.computing = None;
        self.drive = None;
        self.reported = None;
    }

    fn crash(&mut self) {
        self.raft.crash();
        self.task = self.initial.clone();
        self.input = None;
        self.run = None;
        self.applied = None;
        self.reset_volatile();
    }

    fn apply_committed<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(&mut self, env: &mut E2) {
        for entry in self.raft.drain_committed() {
            if let Payload::Command(cmd) = entry.payload {
                self.apply(env, cmd);
            }
        }
    }

    fn apply<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(&mut self, env: &mut E2, cmd: RankCmd<T::Elem, T::Work>) {
        let leader = self.raft.is_leader();
        match cmd {
            RankCmd::Begin(begin) => {
                if self.applied.is_some_and(|a| a >= begin.step) {
                    return;
                }
                if self.run.as_ref().is_some_and(|r| r.begin.attempt >= begin.attempt) {
                    return;
                }
                let Some(slot) = begin.slot_of(self.rank) else {
                    return;
                };
                let slots = match &self.input {
                    Some((step, v)) if *step == begin.step => Some(SlotRun::new(slot, begin.layout.len(), v)),
                    _ => None,
                };
                self.run = Some(Run { begin, slot, slots });
            }
            RankCmd::Input { step, vector } => {
                if self.applied.is_some_and(|a| a >= step) || self.input.as_ref().is_some_and(|(s, _)| *s == step) {
                    return;
                }
                if let Some(run) = self.run.as_mut().filter(|r| r.begin.step == step && r.slots.is_none()) {
                    run.slots = Some(SlotRun::new(run.slot, run.begin.layout.len(), &vector));
                }
                self.input = Some((step, vector));
            }
            RankCmd::Received { attempt, k, segment } => {
                let Some(run) = self.run.as_mut().filter(|r| r.begin.attempt == attempt) else {
                    return;
                };
                let Some(slots) = run.slots.as_mut() else {
                    return;
                };
                let before = slots.next;
                if slots.receive(k, &segment) && leader {
                    // Confirm straight away rather than waiting for a resend.
                    let partner = super::schedule::plan(run.slot, slots.slots, slots.vec.len(), k).partner;
                    let (rank, from_slot) = (run.begin.layout[partner], run.slot);
                    let advanced = slots.next > before;
                    let to = self.address_of(rank);
                    env.send(to, CollMsg::ExchangeAck { attempt, k, from_slot, to_slot: partner });
                    if advanced {
                        env.metric("exchange_step", k as f64);
                    }
                }
            }
            RankCmd::Acked { attempt, k } => {
                let Some(run) = self.run.as_mut().filter(|r| r.begin.attempt == attempt) else {
                    return;
                };
                if let Some(slots) = run.slots.as_mut() {
                    let before = slots.next;
                    if slots.ack(k) && leader && slots.next > before {
                        env.metric("exchange_step", k as f64);
                    }
                }
            }
            RankCmd::Apply { step, attempt } => {
                let Some(run) = self.run.as_ref() else {
                    return;
                };
                if run.begin.step != step || run.begin.attempt != attempt {
                    return;
                }
                let Some(result) = run.slots.as_ref().and_then(|s| s.result()) else {
                    return;
                };
                let total = run.begin.total;
                let reduced = result.to_vec();
                let work = run.begin.work.clone();
                self.task.apply(step, &work, &reduced, total);
                self.applied = Some(step);
                self.run = None;
                self.input = None;
            }
        }
    }

    fn address_of(&self, rank: Option<usize>) -> NodeId {
        match rank {
            Some(r) => self.addresses.get(&r).copied().unwrap_or(self.coordinator),
            None => self.coordinator,
        }
    }

    fn propose<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(
        &mut self,
        env: &mut E2,
        key: Proposal,
        cmd: RankCmd<T::Elem, T::Work>,
    ) {
        if self.proposed.contains(&key) {
            return;
        }
        if self.raft.propose(&mut rank_env!(env, self.rank), cmd).is_ok() {
            self.proposed.insert(key);
        }
    }

    /// Leader duties after any event.
    fn drive<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(&mut self, env: &mut E2) {
        if !self.raft.is_leader() {
            if self.led.is_some() {
                self.reset_volatile();
            }
            return;
        }
        let term = self.raft.term();
        if self.led != Some(term) {
            self.reset_volatile();
            self.led = Some(term);
        }
        if let Some(b) = self.pending_begin.clone() {
            let stale = self.applied.is_some_and(|a| a >= b.step)
                || self.run.as_ref().is_some_and(|r| r.begin.attempt >= b.attempt);
            if stale {
                self.pending_begin = None;
            } else {
                self.propose(env, Proposal::Begin(b.attempt), RankCmd::Begin(b));
            }
        }
        let Some(run) = self.run.clone() else {
            self.beat_if_changed(env);
            return;
        };
        let step = run.begin.step;
        let attempt = run.begin.attempt;
        match &run.slots {
            None => {
                if self.computing != Some(step) && !self.proposed.contains(&Proposal::Input(step)) {
                    self.computing = Some(step);
                    env.set_timer(self.task.compute_ms(&run.begin.work), CollTimer::Compute { step });
                }
            }
            Some(slots) if !slots.is_done() => {
                let k = slots.next;
                let plan = slots.plan().expect("not done");
                let key = (attempt, k);
                if self.drive.as_ref().is_none_or(|d| d.key != key) {
                    self.drive = Some(Drive { key, since: env.now(), none_cycles: 0 });
                    if !slots.acked {
                        self.send_exchange(env, &run, slots);
                    }
                }
                if !slots.received {
                    if let Some(segment) = self.inbox.remove(&key) {
                        if segment.len() == plan.receive.len() {
                            self.propose(env, Proposal::Received(attempt, k), RankCmd::Received { attempt, k, segment });
                        }
                    }
                }
            }
            Some(_) => {
                if self.pending_commit == Some((step, attempt)) {
                    self.propose(env, Proposal::Apply(step), RankCmd::Apply { step, attempt });
                }
            }
        }
        self.beat_if_changed(env);
    }

    fn send_exchange<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(
        &self,
        env: &mut E2,
        run: &Run<T::Elem, T::Work>,
        slots: &SlotRun<T::Elem>,
    ) {
        let (Some(plan), Some(segment)) = (slots.plan(), slots.outgoing()) else {
            return;
        };
        let to = self.address_of(run.begin.layout[plan.partner]);
        env.send(
            to,
            CollMsg::Exchange { attempt: run.begin.attempt, k: slots.next, from_slot: run.slot, to_slot: plan.partner, segment },
        );
    }

    fn beat_if_changed<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(&mut self, env: &mut E2) {
        let status = self.status();
        if self.reported != Some(status) {
            self.beat(env);
        }
    }

    fn beat<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(&mut self, env: &mut E2) {
        let status = self.status();
        self.reported = Some(status);
        env.send(self.coordinator, CollMsg::Beat { rank: self.rank, term: self.raft.term(), status });
    }

    fn on_tick<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(&mut self, env: &mut E2) {
        env.set_timer(self.cfg.tick_ms, CollTimer::Tick);
        if !self.raft.is_leader() {
            return;
        }
        self.beat(env);
        let Some(run) = self.run.clone() else {
            return;
        };
        let Some(slots) = run.slots.as_ref().filter(|s| !s.is_done()) else {
            return;
        };
        let now = env.now();
        let timeout = self.cfg.exchange_timeout_ms;
        let Some(drive) = self.drive.as_mut() else {
            return;
        };
        if now.0.saturating_sub(drive.since.0) < timeout {
            return;
        }
        // One refresh cycle: resend, and ask the coordinator where the partner is.
        drive.since = now;
        let plan = slots.plan().expect("not done");
        if !slots.acked || !slots.received {
            self.send_exchange(env, &run, slots);
        }
        if let Some(r) = run.begin.layout[plan.partner] {
            env.send(self.coordinator, CollMsg::LeaderQuery { rank: r });
        }
    }

    fn on_leader_info<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(
        &mut self,
        env: &mut E2,
        rank: usize,
        leader: Option<NodeId>,
    ) {
        let Some(run) = self.run.clone() else {
            return;
        };
        let Some(slots) = run.slots.as_ref().filter(|s| !s.is_done()) else {
            return;
        };
        let plan = slots.plan().expect("not done");
        if run.begin.layout[plan.partner] != Some(rank) {
            return;
        }
        match leader {
            Some(l) => {
                self.addresses.insert(rank, l);
                if let Some(d) = self.drive.as_mut() {
                    d.none_cycles = 0;
                }
                if !slots.acked {
                    self.send_exchange(env, &run, slots);
                }
            }
            None => {
                let Some(d) = self.drive.as_mut() else {
                    return;
                };
                d.none_cycles += 1;
                if d.none_cycles >= self.cfg.refresh_cycles {
                    env.send(self.coordinator, CollMsg::RankLost { rank, attempt: run.begin.attempt });
                }
            }
        }
    }

    fn on_message<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(
        &mut self,
        env: &mut E2,
        from: NodeId,
        msg: CollMsg<T::Elem, T::Work>,
    ) {
        match msg {
            CollMsg::Raft { rank, msg } if rank == self.rank => {
                self.raft.on_message(&mut rank_env!(env, self.rank), from, msg);
                self.apply_committed(env);
            }
            CollMsg::Begin { begin, hints } if self.raft.is_leader() => {
                self.addresses.extend(hints);
                self.pending_begin = Some(begin);
            }
            CollMsg::Commit { step, attempt } if self.raft.is_leader() => {
                if self.applied.is_some_and(|a| a >= step) {
                    self.beat(env);
                } else {
                    self.pending_commit = Some((step, attempt));
                }
            }
            CollMsg::Exchange { attempt, k, from_slot, to_slot, segment } if self.raft.is_leader() => {
                let Some(run) = self.run.as_ref().filter(|r| r.begin.attempt == attempt && r.slot == to_slot) else {
                    return;
                };
                if let Some(r) = run.begin.layout.get(from_slot).copied().flatten() {
                    self.addresses.insert(r, from);
                }
                let Some(slots) = run.slots.as_ref() else {
                    self.inbox.insert((attempt, k), segment);
                    return;
                };
                if k < slots.next || (k == slots.next && slots.received) || slots.is_done() {
                    env.send(from, CollMsg::ExchangeAck { attempt, k, from_slot: to_slot, to_slot: from_slot });
                } else if k <= slots.next + 1 {
                    self.inbox.insert((attempt, k), segment);
                }
            }
            CollMsg::ExchangeAck { attempt, k, to_slot, .. } if self.raft.is_leader() => {
                let Some(run) = self.run.as_ref().filter(|r| r.begin.attempt == attempt && r.slot == to_slot) else {
                    return;
                };
                if run.slots.as_ref().is_some_and(|s| s.next == k && !s.acked) {
                    self.propose(env, Proposal::Acked(attempt, k), RankCmd::Acked { attempt, k });
                }
            }
            CollMsg::LeaderInfo { rank, leader } if self.raft.is_leader() => self.on_leader_info(env, rank, leader),
            _ => {}
        }
        self.drive(env);
    }

    fn on_timer<E2: Env<CollMsg<T::Elem, T::Work>, CollTimer>>(&mut self, env: &mut E2, timer: CollTimer) {
        match timer {
            CollTimer::Raft(t) => {
                self.raft.on_timer(&mut rank_env!(env, self.rank), t);
                self.apply_committed(env);
            }
            CollTimer::Compute { step } => {
                if self.computing == Some(step) && self.raft.is_leader() {
                    self.computing = None;
                    let work = self.run.as_ref().filter(|r| r.begin.step == step).map(|r| r.begin.work.clone());
                    if let Some(work) = work {
                        let vector = self.task.contribute(step, &work);
                        self.propose(env, Proposal::Input(step), RankCmd::Input { step, vector });
                    }
                }
            }
            CollTimer::Tick => self.on_tick(env),
        }
        self.drive(env);
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum JobState {
    Starting,
    /// Waiting for every included rank to finish the collective.
    Reducing,
    /// Waiting for every included rank to apply the committed result.
    Committing,
    Finished,
    Aborted(String),
}

#[derive(Clone, Copy, Debug)]
struct Seen {
    node: NodeId,
    term: Term,
    at: SimTime,
    status: RankStatus,
}

/// Orchestrates steps, serves leader lookups and hosts padding slots.
#[derive(Debug)]
pub struct Coordinator<P: Planner, E> {
    cfg: CollectiveConfig,
    pub planner: P,
    members: Vec<Vec<NodeId>>,
    len: usize,
    seen: Vec<Option<Seen>>,
    included: BTreeSet<usize>,
    lost: BTreeSet<usize>,
    state: JobState,
    step: u64,
    attempt: u64,
    layout: Vec<Option<usize>>,
    work: BTreeMap<usize, P::Work>,
    total: u64,
    virtuals: BTreeMap<usize, SlotRun<E>>,
    started_at: SimTime,
    /// Ranks whose contribution was committed, per step.
    pub committed: Vec<(u64, Vec<usize>)>,
}

impl<P: Planner, E: Element> Coordinator<P, E> {
    pub fn new(cfg: CollectiveConfig, planner: P, members: Vec<Vec<NodeId>>, len: usize) -> Self {
        let n = members.len();
        Coordinator {
            cfg,
            planner,
            members,
            len,
            seen: vec![None; n],
            included: (0..n).collect(),
            lost: BTreeSet::new(),
            state: JobState::Starting,
            step: 0,
            attempt: 0,
            layout: Vec::new(),
            work: BTreeMap::new(),
            total: 0,
            virtuals: BTreeMap::new(),
            started_at: SimTime::ZERO,
            committed: Vec::new(),
        }
    }

    pub fn state(&self) -> &JobState {
        &self.state
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn attempt(&self) -> u64 {
        self.attempt
    }

    pub fn included(&self) -> &BTreeSet<usize> {
        &self.included
    }

    pub fn lost(&self) -> &BTreeSet<usize> {
        &self.lost
    }

    pub fn layout(&self) -> &[Option<usize>] {
        &self.layout
    }

    fn live_leader(&self, rank: usize, now: SimTime) -> Option<NodeId> {
        self.seen[rank]
            .filter(|s| now.0.saturating_sub(s.at.0) <= self.cfg.leader_window_ms)
            .map(|s| s.node)
    }

    fn hints(&self, now: SimTime) -> BTreeMap<usize, NodeId> {
        (0..self.members.len()).filter_map(|r| self.live_leader(r, now).map(|l| (r, l))).collect()
    }

    fn start_step<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&mut self, env: &mut Ev) {
        let ranks: Vec<usize> = self.included.iter().copied().collect();
        match self.planner.plan(self.step, &ranks) {
            Some(work) => {
                self.work = work;
                self.new_attempt(env);
            }
            None => {
                self.state = JobState::Finished;
                env.metric("job_finished", self.step as f64);
            }
        }
    }

    /// Lays out the included ranks (padded to a power of two) and starts a
    /// fresh collective for the current step.
    fn new_attempt<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&mut self, env: &mut Ev) {
        if self.included.is_empty() {
            self.state = JobState::Aborted("every rank lost".into());
            env.metric("job_aborted", self.step as f64);
            return;
        }
        self.attempt += 1;
        let mut layout: Vec<Option<usize>> = self.included.iter().map(|r| Some(*r)).collect();
        layout.resize(layout.len().next_power_of_two(), None);
        let p = layout.len();
        let zeros = vec![E::default(); self.len];
        self.virtuals = (0..p).filter(|s| layout[*s].is_none()).map(|s| (s, SlotRun::new(s, p, &zeros))).collect();
        self.layout = layout;
        self.total = self.work.values().map(|w| self.planner.size(w)).sum();
        self.state = JobState::Reducing;
        env.metric("attempt_started", self.attempt as f64);
        let now = env.now();
        for r in self.included.clone() {
            self.send_begin(env, r, now);
        }
        for s in self.virtuals.keys().copied().collect::<Vec<_>>() {
            self.send_virtual(env, s);
        }
    }

    fn begin_for(&self, rank: usize) -> Begin<P::Work> {
        Begin {
            step: self.step,
            attempt: self.attempt,
            layout: self.layout.clone(),
            work: self.work[&rank].clone(),
            total: self.total,
        }
    }

    fn send_to_rank<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(
        &self,
        env: &mut Ev,
        rank: usize,
        now: SimTime,
        msg: CollMsg<E, P::Work>,
    ) {
        match self.live_leader(rank, now) {
            Some(l) => env.send(l, msg),
            None => {
                for m in &self.members[rank] {
                    env.send(*m, msg.clone());
                }
            }
        }
    }

    fn send_begin<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&self, env: &mut Ev, rank: usize, now: SimTime) {
        let msg = CollMsg::Begin { begin: self.begin_for(rank), hints: self.hints(now) };
        self.send_to_rank(env, rank, now, msg);
    }

    fn send_virtual<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&self, env: &mut Ev, slot: usize) {
        let Some(run) = self.virtuals.get(&slot) else {
            return;
        };
        let (Some(plan), Some(segment)) = (run.plan(), run.outgoing()) else {
            return;
        };
        if run.acked {
            return;
        }
        let msg = CollMsg::Exchange { attempt: self.attempt, k: run.next, from_slot: slot, to_slot: plan.partner, segment };
        match self.layout[plan.partner] {
            Some(r) => self.send_to_rank(env, r, env.now(), msg),
            None => env.send(env.me(), msg),
        }
    }

    fn exclude<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&mut self, env: &mut Ev, rank: usize) {
        if !self.included.remove(&rank) {
            return;
        }
        self.lost.insert(rank);
        env.metric("rank_lost", rank as f64);
        match self.state {
            JobState::Reducing => {
                if let Some(w) = self.work.remove(&rank) {
                    self.planner.on_lost(self.step, rank, &w);
                }
                self.new_attempt(env);
            }
            JobState::Committing => self.check_progress(env),
            _ => {}
        }
    }

    fn check_progress<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&mut self, env: &mut Ev) {
        let now = env.now();
        match self.state {
            JobState::Starting => {
                let all_seen = self.seen.iter().all(|s| s.is_some());
                if all_seen || now.0 >= self.started_at.0 + self.cfg.start_timeout_ms {
                    let unseen: Vec<usize> = (0..self.members.len()).filter(|r| self.seen[*r].is_none()).collect();
                    for r in unseen {
                        self.included.remove(&r);
                        self.lost.insert(r);
                        env.metric("rank_lost", r as f64);
                    }
                    self.start_step(env);
                }
            }
            JobState::Reducing => {
                let key = (self.step, self.attempt, true);
                let done = self.included.iter().all(|r| self.seen[*r].is_some_and(|s| s.status.running == Some(key)));
                if done {
                    self.state = JobState::Committing;
                    let (step, attempt) = (self.step, self.attempt);
                    env.metric("allreduce_reduced", step as f64);
                    for r in self.included.clone() {
                        self.send_to_rank(env, r, now, CollMsg::Commit { step, attempt });
                    }
                }
            }
            JobState::Committing => {
                let step = self.step;
                let done = self
                    .included
                    .iter()
                    .all(|r| self.seen[*r].is_some_and(|s| s.status.applied.is_some_and(|a| a >= step)));
                if done {
                    let work = std::mem::take(&mut self.work);
                    let ranks: Vec<usize> = work.keys().copied().collect();
                    self.planner.on_committed(step, &work);
                    self.committed.push((step, ranks));
                    env.metric("step_committed", step as f64);
                    self.step += 1;
                    self.start_step(env);
                }
            }
            JobState::Finished | JobState::Aborted(_) => {}
        }
    }

    fn on_tick<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&mut self, env: &mut Ev) {
        env.set_timer(self.cfg.tick_ms, CollTimer::Tick);
        let now = env.now();
        if matches!(self.state, JobState::Finished | JobState::Aborted(_)) {
            return;
        }
        if self.state != JobState::Starting {
            let silent: Vec<usize> = self
                .included
                .iter()
                .copied()
                .filter(|r| self.seen[*r].is_none_or(|s| now.0.saturating_sub(s.at.0) > self.cfg.lost_after_ms))
                .collect();
            for r in silent {
                self.exclude(env, r);
            }
        }
        match self.state {
            JobState::Reducing => {
                for r in self.included.clone() {
                    let want = (self.step, self.attempt);
                    let running = self.seen[r].and_then(|s| s.status.running).map(|(s, a, _)| (s, a));
                    if running != Some(want) {
                        self.send_begin(env, r, now);
                    }
                }
                for s in self.virtuals.keys().copied().collect::<Vec<_>>() {
                    self.send_virtual(env, s);
                }
            }
            JobState::Committing => {
                let (step, attempt) = (self.step, self.attempt);
                for r in self.included.clone() {
                    if self.seen[r].is_none_or(|s| s.status.applied.is_none_or(|a| a < step)) {
                        self.send_to_rank(env, r, now, CollMsg::Commit { step, attempt });
                    }
                }
            }
            _ => {}
        }
        self.check_progress(env);
    }

    fn on_message<Ev: Env<CollMsg<E, P::Work>, CollTimer>>(&mut self, env: &mut Ev, from: NodeId, msg: CollMsg<E, P::Work>) {
        let now = env.now();
        match msg {
            CollMsg::Beat { rank, term, status } => {
                if rank >= self.seen.len() {
                    return;
                }
                let newer = self.seen[rank].is_none_or(|s| term >= s.term);
                if newer {
                    if self.seen[rank].is_none_or(|s| s.node != from) {
                        env.metric("rank_leader_changed", rank as f64);
                    }
                    self.seen[rank] = Some(Seen { node: from, term, at: now, status });
                }
                self.check_progress(env);
            }
            CollMsg::LeaderQuery { rank } => {
                let leader = if rank < self.seen.len() { self.live_leader(rank, now) } else { None };
                env.send(from, CollMsg::LeaderInfo { rank, leader });
            }
            CollMsg::RankLost { rank, attempt } => {
                if attempt == self.attempt && self.state == JobState::Reducing && self.live_leader(rank, now).is_none() {
                    self.exclude(env, rank);
                }
            }
            CollMsg::Exchange { attempt, k, from_slot, to_slot, segment } => {
                if attempt != self.attempt {
                    return;
                }
                let Some(run) = self.virtuals.get_mut(&to_slot) else {
                    return;
                };
                let acked = k < run.next || (k == run.next && run.received) || run.is_done();
                let fresh = !acked && run.receive(k, &segment);
                if acked || fresh {
                    env.send(from, CollMsg::ExchangeAck { attempt, k, from_slot: to_slot, to_slot: from_slot });
                }
                if fresh {
                    self.send_virtual(env, to_slot);
                }
            }
            CollMsg::ExchangeAck { attempt, k, to_slot, .. } => {
                if attempt != self.attempt {
                    return;
                }
                if let Some(run) = self.virtuals.get_mut(&to_slot) {
                    if run.ack(k) {
                        self.send_virtual(env, to_slot);
                    }
                }
            }
            _ => {}
        }
    }
}

/// A node in a collective simulation.
#[derive(Debug)]
pub enum CollectiveNode<T: RankTask, P: Planner<Work = T::Work>> {
    Coordinator(Box<Coordinator<P, T::Elem>>),
    Replica(Box<RankReplica<T>>),
}

impl<T: RankTask, P: Planner<Work = T::Work>> CollectiveNode<T, P> {
    pub fn as_replica(&self) -> Option<&RankReplica<T>> {
        match self {
            CollectiveNode::Replica(r) => Some(r),
            CollectiveNode::Coordinator(_) => None,
        }
    }

    pub fn as_coordinator(&self) -> Option<&Coordinator<P, T::Elem>> {
        match self {
            CollectiveNode::Coordinator(c) => Some(c),
            CollectiveNode::Replica(_) => None,
        }
    }
}

impl<T: RankTask, P: Planner<Work = T::Work>> Process for CollectiveNode<T, P> {
    type Msg = CollMsg<T::Elem, T::Work>;
    type Timer = CollTimer;

    fn on_start(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>) {
        match self {
            CollectiveNode::Coordinator(c) => {
                c.started_at = ctx.now();
                ctx.set_timer(c.cfg.tick_ms, CollTimer::Tick);
            }
            CollectiveNode::Replica(r) => {
                r.raft.start(&mut rank_env!(ctx, r.rank));
                ctx.set_timer(r.cfg.tick_ms, CollTimer::Tick);
            }
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>, from: NodeId, msg: Self::Msg) {
        match self {
            CollectiveNode::Coordinator(c) => c.on_message(ctx, from, msg),
            CollectiveNode::Replica(r) => r.on_message(ctx, from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>, timer: Self::Timer) {
        match self {
            CollectiveNode::Coordinator(c) => {
                if let CollTimer::Tick = timer {
                    c.on_tick(ctx);
                }
            }
            CollectiveNode::Replica(r) => r.on_timer(ctx, timer),
        }
    }

    fn on_crash(&mut self) {
        if let CollectiveNode::Replica(r) = self {
            r.crash();
        }
    }

    fn on_restart(&mut self, ctx: &mut Ctx<'_, Self::Msg, Self::Timer>) {
        self.on_start(ctx);
    }
}
