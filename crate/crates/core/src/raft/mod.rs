//! Raft consensus as a pure state machine.
//!
//! [`RaftNode`] never touches the simulator directly: every handler takes an
//! [`Env`] for sends, timers and randomness, so the same code drives tracker
//! groups, all-reduce rank groups and the standalone [`cluster`] used for
//! chaos testing.
//!
//! Beyond the basic election and replication loop this implements the three
//! standard safety rules: candidates must have an up-to-date log to win a
//! vote, leaders only count replicas toward commitment for entries of their
//! own term, and followers reject AppendEntries whose previous entry does not
//! match. Membership is the latest `SetMembers` entry in the log, effective
//! as soon as it is appended.

pub mod cluster;

use crate::sim::{Env, NodeId, SimTime};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;

pub type Term = u64;
pub type LogIndex = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaftConfig {
    pub election_min_ms: u64,
    pub election_max_ms: u64,
    pub heartbeat_ms: u64,
    /// Entries per AppendEntries message.
    pub max_batch: usize,
}

impl Default for RaftConfig {
    fn default() -> Self {
        RaftConfig { election_min_ms: 150, election_max_ms: 300, heartbeat_ms: 50, max_batch: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload<C> {
    /// Appended by every new leader so earlier-term entries can commit.
    Noop,
    Command(C),
    /// Replaces the whole member list.
    SetMembers(Vec<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry<C> {
    pub term: Term,
    pub index: LogIndex,
    pub payload: Payload<C>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RaftMsg<C> {
    RequestVote { term: Term, candidate: NodeId, last_log_index: LogIndex, last_log_term: Term },
    VoteReply { term: Term, granted: bool },
    AppendEntries {
        term: Term,
        leader: NodeId,
        prev_log_index: LogIndex,
        prev_log_term: Term,
        entries: Vec<LogEntry<C>>,
        leader_commit: LogIndex,
    },
    AppendReply { term: Term, success: bool, match_index: LogIndex },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RaftTimer {
    Election { epoch: u64 },
    Heartbeat { epoch: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NotLeader {
    pub hint: Option<NodeId>,
}

/// One Raft participant.
#[derive(Clone, Debug)]
pub struct RaftNode<C> {
    id: NodeId,
    config: RaftConfig,
    // durable
    current_term: Term,
    voted_for: Option<NodeId>,
    log: Vec<LogEntry<C>>,
    initial_members: Vec<NodeId>,
    // volatile
    members: Vec<NodeId>,
    role: Role,
    commit_index: LogIndex,
    last_applied: LogIndex,
    leader_hint: Option<NodeId>,
    votes: BTreeSet<NodeId>,
    next_index: BTreeMap<NodeId, LogIndex>,
    match_index: BTreeMap<NodeId, LogIndex>,
    last_ack: BTreeMap<NodeId, SimTime>,
    election_epoch: u64,
    heartbeat_epoch: u64,
    leader_since: Option<SimTime>,
}

impl<C: Clone + Debug + PartialEq> RaftNode<C> {
    pub fn new(id: NodeId, members: Vec<NodeId>, config: RaftConfig) -> Self {
        RaftNode {
            id,
            config,
            current_term: 0,
            voted_for: None,
            log: Vec::new(),
            initial_members: members.clone(),
            members,
            role: Role::Follower,
            commit_index: 0,
            last_applied: 0,
            leader_hint: None,
            votes: BTreeSet::new(),
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            last_ack: BTreeMap::new(),
            election_epoch: 0,
            heartbeat_epoch: 0,
            leader_since: None,
        }
    }

    /// A node joining an existing group from a full state transfer.
    pub fn from_transfer(
        id: NodeId,
        initial_members: Vec<NodeId>,
        term: Term,
        log: Vec<LogEntry<C>>,
        config: RaftConfig,
    ) -> Self {
        let mut node = RaftNode::new(id, initial_members, config);
        node.current_term = term;
        node.log = log;
        node.refresh_members();
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn is_leader(&self) -> bool {
        self.role == Role::Leader
    }

    pub fn term(&self) -> Term {
        self.current_term
    }

    pub fn voted_for(&self) -> Option<NodeId> {
        self.voted_for
    }

    pub fn log(&self) -> &[LogEntry<C>] {
        &self.log
    }

    pub fn initial_members(&self) -> &[NodeId] {
        &self.initial_members
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn commit_index(&self) -> LogIndex {
        self.commit_index
    }

    pub fn last_applied(&self) -> LogIndex {
        self.last_applied
    }

    pub fn leader_hint(&self) -> Option<NodeId> {
        if self.role == Role::Leader {
            Some(self.id)
        } else {
            self.leader_hint
        }
    }

    pub fn leader_since(&self) -> Option<SimTime> {
        self.leader_since
    }

    pub fn last_index(&self) -> LogIndex {
        self.log.len() as LogIndex
    }

    pub fn last_term(&self) -> Term {
        self.log.last().map_or(0, |e| e.term)
    }

    pub fn entry(&self, index: LogIndex) -> Option<&LogEntry<C>> {
        if index == 0 {
            None
        } else {
            self.log.get(index as usize - 1)
        }
    }

    fn term_at(&self, index: LogIndex) -> Term {
        self.entry(index).map_or(0, |e| e.term)
    }

    fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }

    fn others(&self) -> Vec<NodeId> {
        self.members.iter().copied().filter(|m| *m != self.id).collect()
    }

    fn refresh_members(&mut self) {
        self.members = self
            .log
            .iter()
            .rev()
            .find_map(|e| match &e.payload {
                Payload::SetMembers(m) => Some(m.clone()),
                _ => None,
            })
            .unwrap_or_else(|| self.initial_members.clone());
    }

    /// Whether a candidate log `(last_term, last_index)` is at least as up to date as ours.
    pub fn log_up_to_date(&self, last_log_term: Term, last_log_index: LogIndex) -> bool {
        (last_log_term, last_log_index) >= (self.last_term(), self.last_index())
    }

    /// Arms the first election timer.
    pub fn start<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E) {
        self.reset_election_timer(env);
    }

    /// Forgets volatile state. The log, term and vote are kept.
    pub fn crash(&mut self) {
        self.role = Role::Follower;
        self.commit_index = 0;
        self.last_applied = 0;
        self.leader_hint = None;
        self.votes.clear();
        self.next_index.clear();
        self.match_index.clear();
        self.last_ack.clear();
        self.leader_since = None;
        self.election_epoch += 1;
        self.heartbeat_epoch += 1;
        self.refresh_members();
    }

    fn reset_election_timer<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E) {
        self.election_epoch += 1;
        let timeout = env
            .rng()
            .random_range(self.config.election_min_ms..=self.config.election_max_ms);
        env.set_timer(timeout, RaftTimer::Election { epoch: self.election_epoch });
    }

    fn step_down(&mut self, term: Term) {
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
        }
        if self.role != Role::Follower {
            self.role = Role::Follower;
            self.heartbeat_epoch += 1;
            self.leader_since = None;
        }
    }

    pub fn on_timer<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E, timer: RaftTimer) {
        match timer {
            RaftTimer::Election { epoch } => {
                if epoch != self.election_epoch || self.role == Role::Leader {
                    return;
                }
                if !self.members.contains(&self.id) {
                    return;
                }
                self.start_election(env);
            }
            RaftTimer::Heartbeat { epoch } => {
                if epoch != self.heartbeat_epoch || self.role != Role::Leader {
                    return;
                }
                self.broadcast_append(env);
                env.set_timer(self.config.heartbeat_ms, RaftTimer::Heartbeat { epoch });
            }
        }
    }

    fn start_election<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E) {
        self.current_term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id);
        self.leader_hint = None;
        self.votes.clear();
        self.votes.insert(self.id);
        self.reset_election_timer(env);
        env.metric("raft_candidate", self.current_term as f64);
        if self.votes.len() >= self.majority() {
            self.become_leader(env);
            return;
        }
        let msg = RaftMsg::RequestVote {
            term: self.current_term,
            candidate: self.id,
            last_log_index: self.last_index(),
            last_log_term: self.last_term(),
        };
        for peer in self.others() {
            env.send(peer, msg.clone());
        }
    }

    fn become_leader<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E) {
        self.role = Role::Leader;
        self.leader_hint = Some(self.id);
        self.leader_since = Some(env.now());
        self.heartbeat_epoch += 1;
        self.next_index.clear();
        self.match_index.clear();
        self.last_ack.clear();
        let next = self.last_index() + 1;
        for peer in self.others() {
            self.next_index.insert(peer, next);
            self.match_index.insert(peer, 0);
            self.last_ack.insert(peer, env.now());
        }
        env.metric("raft_leader", self.current_term as f64);
        self.append_local(Payload::Noop, env.now());
        self.advance_commit();
        self.broadcast_append(env);
        env.set_timer(self.config.heartbeat_ms, RaftTimer::Heartbeat { epoch: self.heartbeat_epoch });
    }

    fn append_local(&mut self, payload: Payload<C>, now: SimTime) -> LogIndex {
        let index = self.last_index() + 1;
        let is_config = matches!(payload, Payload::SetMembers(_));
        self.log.push(LogEntry { term: self.current_term, index, payload });
        if is_config {
            self.refresh_members();
            let next = index;
            for peer in self.others() {
                self.next_index.entry(peer).or_insert(next);
                self.match_index.entry(peer).or_insert(0);
                self.last_ack.entry(peer).or_insert(now);
            }
        }
        index
    }

    /// Appends a client command. Only the leader accepts proposals.
    pub fn propose<E: Env<RaftMsg<C>, RaftTimer>>(
        &mut self,
        env: &mut E,
        command: C,
    ) -> Result<(LogIndex, Term), NotLeader> {
        self.propose_payload(env, Payload::Command(command))
    }

    /// Appends a membership change; it takes effect immediately on this leader.
    pub fn propose_members<E: Env<RaftMsg<C>, RaftTimer>>(
        &mut self,
        env: &mut E,
        members: Vec<NodeId>,
    ) -> Result<(LogIndex, Term), NotLeader> {
        self.propose_payload(env, Payload::SetMembers(members))
    }

    fn propose_payload<E: Env<RaftMsg<C>, RaftTimer>>(
        &mut self,
        env: &mut E,
        payload: Payload<C>,
    ) -> Result<(LogIndex, Term), NotLeader> {
        if self.role != Role::Leader {
            return Err(NotLeader { hint: self.leader_hint });
        }
        let index = self.append_local(payload, env.now());
        self.advance_commit();
        self.broadcast_append(env);
        Ok((index, self.current_term))
    }

    fn broadcast_append<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E) {
        for peer in self.others() {
            self.send_append(env, peer);
        }
    }

    fn send_append<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E, peer: NodeId) {
        let next = *self.next_index.entry(peer).or_insert(self.log.len() as LogIndex + 1);
        let prev_log_index = next - 1;
        let start = prev_log_index as usize;
        let end = (start + self.config.max_batch).min(self.log.len());
        let entries = self.log[start..end].to_vec();
        env.send(
            peer,
            RaftMsg::AppendEntries {
                term: self.current_term,
                leader: self.id,
                prev_log_index,
                prev_log_term: self.term_at(prev_log_index),
                entries,
                leader_commit: self.commit_index,
            },
        );
    }

    fn advance_commit(&mut self) {
        if self.role != Role::Leader {
            return;
        }
        let mut n = self.last_index();
        while n > self.commit_index {
            if self.term_at(n) == self.current_term {
                let replicated = self
                    .members
                    .iter()
                    .filter(|m| {
                        **m == self.id || self.match_index.get(m).copied().unwrap_or(0) >= n
                    })
                    .count();
                if replicated >= self.majority() {
                    self.commit_index = n;
                    return;
                }
            } else {
                // earlier-term entries commit only via a current-term entry
                return;
            }
            n -= 1;
        }
    }

    pub fn on_message<E: Env<RaftMsg<C>, RaftTimer>>(&mut self, env: &mut E, from: NodeId, msg: RaftMsg<C>) {
        match msg {
            RaftMsg::RequestVote { term, candidate, last_log_index, last_log_term } => {
                let granted = self.handle_request_vote(env, term, candidate, last_log_term, last_log_index);
                env.send(from, RaftMsg::VoteReply { term: self.current_term, granted });
            }
            RaftMsg::VoteReply { term, granted } => {
                if term > self.current_term {
                    self.step_down(term);
                    self.reset_election_timer(env);
                    return;
                }
                if self.role == Role::Candidate && term == self.current_term && granted {
                    self.votes.insert(from);
                    let count = self.votes.iter().filter(|v| self.members.contains(v)).count();
                    if count >= self.majority() {
                        self.become_leader(env);
                    }
                }
            }
            RaftMsg::AppendEntries { term, leader, prev_log_index, prev_log_term, entries, leader_commit } => {
                let reply = self.handle_append(env, term, leader, prev_log_index, prev_log_term, entries, leader_commit);
                env.send(from, reply);
            }
            RaftMsg::AppendReply { term, success, match_index } => {
                if term > self.current_term {
                    self.step_down(term);
                    self.reset_election_timer(env);
                    return;
                }
                if self.role != Role::Leader || term != self.current_term {
                    return;
                }
                self.last_ack.insert(from, env.now());
                if success {
                    let m = self.match_index.entry(from).or_insert(0);
                    *m = (*m).max(match_index);
                    let matched = *m;
                    self.next_index.insert(from, matched + 1);
                    self.advance_commit();
                    if matched < self.last_index() {
                        self.send_append(env, from);
                    }
                } else {
                    let next = self.next_index.get(&from).copied().unwrap_or(1);
                    let retry = next.saturating_sub(1).min(match_index + 1).max(1);
                    self.next_index.insert(from, retry);
                    self.send_append(env, from);
                }
            }
        }
    }

    /// Vote decision. Grant iff the term is current, we have not voted for
    /// someone else in it, and the candidate's log is at least as up to date.
    pub fn handle_request_vote<E: Env<RaftMsg<C>, RaftTimer>>(
        &mut self,
        env: &mut E,
        term: Term,
        candidate: NodeId,
        last_log_term: Term,
        last_log_index: LogIndex,
    ) -> bool {
        if !self.members.contains(&candidate) {
            return false;
        }
        if term > self.current_term {
            self.step_down(term);
        }
        let granted = term == self.current_term
            && self.voted_for.is_none_or(|v| v == candidate)
            && self.log_up_to_date(last_log_term, last_log_index);
        if granted {
            self.voted_for = Some(candidate);
            self.reset_election_timer(env);
        }
        granted
    }

    #[allow(clippy::too_many_arguments)]
    fn handle_append<E: Env<RaftMsg<C>, RaftTimer>>(
        &mut self,
        env: &mut E,
        term: Term,
        leader: NodeId,
        prev_log_index: LogIndex,
        prev_log_term: Term,
        entries: Vec<LogEntry<C>>,
        leader_commit: LogIndex,
    ) -> RaftMsg<C> {
        if term < self.current_term {
            return RaftMsg::AppendReply { term: self.current_term, success: false, match_index: 0 };
        }
        self.step_down(term);
        self.leader_hint = Some(leader);
        self.reset_election_timer(env);

        if prev_log_index > self.last_index() || self.term_at(prev_log_index) != prev_log_term {
            let hint = self.last_index().min(prev_log_index.saturating_sub(1));
            return RaftMsg::AppendReply { term: self.current_term, success: false, match_index: hint };
        }
        let mut changed = false;
        for entry in entries.iter() {
            match self.entry(entry.index) {
                Some(existing) if existing.term == entry.term => {}
                Some(_) => {
                    assert!(entry.index > self.commit_index, "leader tried to overwrite a committed entry");
                    self.log.truncate(entry.index as usize - 1);
                    self.log.push(entry.clone());
                    changed = true;
                }
                None => {
                    self.log.push(entry.clone());
                    changed = true;
                }
            }
        }
        if changed {
            self.refresh_members();
        }
        let last_new = prev_log_index + entries.len() as LogIndex;
        if leader_commit > self.commit_index {
            self.commit_index = leader_commit.min(last_new).max(self.commit_index);
        }
        RaftMsg::AppendReply { term: self.current_term, success: true, match_index: last_new }
    }

    /// Newly committed entries, in order. Each entry is returned once per
    /// incarnation (a restart replays from the start of the log).
    pub fn drain_committed(&mut self) -> Vec<LogEntry<C>> {
        let from = self.last_applied as usize;
        let to = self.commit_index as usize;
        if to <= from {
            return Vec::new();
        }
        self.last_applied = self.commit_index;
        self.log[from..to].to_vec()
    }

    /// Time since each follower last answered an AppendEntries (leader only).
    pub fn follower_silence(&self, now: SimTime) -> Vec<(NodeId, u64)> {
        if self.role != Role::Leader {
            return Vec::new();
        }
        self.others()
            .into_iter()
            .map(|p| {
                let last = self.last_ack.get(&p).copied().unwrap_or(SimTime::ZERO);
                (p, now.0.saturating_sub(last.0))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Collects effects instead of delivering them.
    struct Recorder {
        now: SimTime,
        me: NodeId,
        rng: ChaCha8Rng,
        sent: Vec<(NodeId, RaftMsg<u32>)>,
        timers: Vec<(u64, RaftTimer)>,
    }

    impl Recorder {
        fn new(me: u32) -> Self {
            Recorder {
                now: SimTime(0),
                me: NodeId(me),
                rng: ChaCha8Rng::seed_from_u64(7),
                sent: Vec::new(),
                timers: Vec::new(),
            }
        }
    }

    impl Env<RaftMsg<u32>, RaftTimer> for Recorder {
        fn now(&self) -> SimTime {
            self.now
        }
        fn me(&self) -> NodeId {
            self.me
        }
        fn send(&mut self, to: NodeId, msg: RaftMsg<u32>) {
            self.sent.push((to, msg));
        }
        fn set_timer(&mut self, after_ms: u64, timer: RaftTimer) {
            self.timers.push((after_ms, timer));
        }
        fn rng(&mut self) -> &mut ChaCha8Rng {
            &mut self.rng
        }
        fn metric(&mut self, _: &str, _: f64) {}
    }

    fn members() -> Vec<NodeId> {
        (0..3).map(NodeId).collect()
    }

    fn entry(term: Term, index: LogIndex) -> LogEntry<u32> {
        LogEntry { term, index, payload: Payload::Command(index as u32) }
    }

    #[test]
    fn fresh_vote_granted() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        assert!(n.handle_request_vote(&mut env, 1, NodeId(1), 0, 0));
        assert_eq!(n.voted_for(), Some(NodeId(1)));
        assert_eq!(n.term(), 1);
    }

    #[test]
    fn second_candidate_same_term_denied() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        assert!(n.handle_request_vote(&mut env, 1, NodeId(1), 0, 0));
        assert!(!n.handle_request_vote(&mut env, 1, NodeId(2), 0, 0));
        // re-delivery of the granted request is still granted
        assert!(n.handle_request_vote(&mut env, 1, NodeId(1), 0, 0));
    }

    #[test]
    fn stale_log_candidate_denied() {
        let log = vec![entry(1, 1), entry(2, 2), entry(2, 3)];
        let mut n = RaftNode::from_transfer(NodeId(0), members(), 2, log, RaftConfig::default());
        let mut env = Recorder::new(0);
        // shorter log with lower last term
        assert!(!n.handle_request_vote(&mut env, 3, NodeId(1), 1, 2));
        // term still adopted even though vote denied
        assert_eq!(n.term(), 3);
        // longer log with lower last term also loses
        assert!(!n.handle_request_vote(&mut env, 3, NodeId(2), 1, 9));
        // same last term, equal length wins
        assert!(n.handle_request_vote(&mut env, 3, NodeId(2), 2, 3));
    }

    #[test]
    fn non_member_vote_ignored() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        assert!(!n.handle_request_vote(&mut env, 9, NodeId(7), 0, 0));
        assert_eq!(n.term(), 0);
    }

    #[test]
    fn election_timeout_starts_candidacy() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        n.start(&mut env);
        let (after, timer) = env.timers[0];
        assert!((150..=300).contains(&after));
        n.on_timer(&mut env, timer);
        assert_eq!(n.role(), Role::Candidate);
        assert_eq!(n.term(), 1);
        assert_eq!(n.voted_for(), Some(NodeId(0)));
        let votes = env.sent.iter().filter(|(_, m)| matches!(m, RaftMsg::RequestVote { .. })).count();
        assert_eq!(votes, 2);
        // resampled timeout
        let (after, _) = env.timers[1];
        assert!((150..=300).contains(&after));
    }

    #[test]
    fn timeouts_sample_whole_range() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        for _ in 0..2000 {
            n.reset_election_timer(&mut env);
        }
        let lo = env.timers.iter().map(|t| t.0).min().unwrap();
        let hi = env.timers.iter().map(|t| t.0).max().unwrap();
        assert_eq!((lo, hi), (150, 300));
    }

    #[test]
    fn stale_election_timer_ignored() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        n.start(&mut env);
        let (_, first) = env.timers[0];
        // a heartbeat from a leader resets the timer
        let reply = n.handle_append(&mut env, 1, NodeId(1), 0, 0, vec![], 0);
        assert!(matches!(reply, RaftMsg::AppendReply { success: true, .. }));
        n.on_timer(&mut env, first);
        assert_eq!(n.role(), Role::Follower);
    }

    #[test]
    fn single_member_elects_itself() {
        let mut n = RaftNode::<u32>::new(NodeId(4), vec![NodeId(4)], RaftConfig::default());
        let mut env = Recorder::new(4);
        n.start(&mut env);
        let (_, t) = env.timers[0];
        n.on_timer(&mut env, t);
        assert!(n.is_leader());
        let (idx, _) = n.propose(&mut env, 11).unwrap();
        assert_eq!(n.commit_index(), idx);
        let applied = n.drain_committed();
        assert_eq!(applied.len(), 2);
        assert_eq!(applied[1].payload, Payload::Command(11));
    }

    #[test]
    fn append_rejects_gap_and_truncates_conflict() {
        let mut n = RaftNode::from_transfer(
            NodeId(0),
            members(),
            2,
            vec![entry(1, 1), entry(2, 2), entry(2, 3)],
            RaftConfig::default(),
        );
        let mut env = Recorder::new(0);
        let r = n.handle_append(&mut env, 3, NodeId(1), 5, 3, vec![], 0);
        assert!(matches!(r, RaftMsg::AppendReply { success: false, match_index: 3, .. }));
        let r = n.handle_append(&mut env, 3, NodeId(1), 1, 1, vec![entry(3, 2)], 2);
        assert!(matches!(r, RaftMsg::AppendReply { success: true, match_index: 2, .. }));
        assert_eq!(n.last_index(), 2);
        assert_eq!(n.log()[1].term, 3);
        assert_eq!(n.commit_index(), 2);
    }

    #[test]
    fn reordered_old_append_does_not_truncate() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        n.handle_append(&mut env, 1, NodeId(1), 0, 0, vec![entry(1, 1), entry(1, 2)], 0);
        n.handle_append(&mut env, 1, NodeId(1), 0, 0, vec![entry(1, 1)], 0);
        assert_eq!(n.last_index(), 2);
    }

    #[test]
    fn follower_redirects_proposals() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        n.handle_append(&mut env, 1, NodeId(2), 0, 0, vec![], 0);
        assert_eq!(n.propose(&mut env, 1), Err(NotLeader { hint: Some(NodeId(2)) }));
    }

    #[test]
    fn membership_follows_latest_config_entry() {
        let mut n = RaftNode::<u32>::new(NodeId(0), members(), RaftConfig::default());
        let mut env = Recorder::new(0);
        let cfg = LogEntry { term: 1, index: 1, payload: Payload::SetMembers(vec![NodeId(0), NodeId(1), NodeId(5)]) };
        n.handle_append(&mut env, 1, NodeId(1), 0, 0, vec![cfg], 0);
        assert_eq!(n.members(), &[NodeId(0), NodeId(1), NodeId(5)]);
        // truncation of the config entry reverts membership
        n.handle_append(&mut env, 2, NodeId(1), 0, 0, vec![entry(2, 1)], 0);
        assert_eq!(n.members(), members().as_slice());
    }
}
