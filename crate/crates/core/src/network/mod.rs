//! The simulated Hydra network: bootstrap servers and peers on one simulation,
//! with helpers to drive dataset operations and inspect tracker groups.

mod peer;
mod wire;

pub use peer::{PeerNode, PeerProfile};
pub(crate) use peer::{BootPurpose, CallPurpose, LookupPurpose, Outstanding};
pub use wire::{BootAnswer, BootCall, CoinCall, NetMsg, NetTimer, ReqId, TrackerAnswer, TrackerCall};

use crate::bootstrap::{BootstrapServer, BootstrapState};
use crate::coin::{Ledger, Rates};
use crate::dht::{Contact, DhtConfig, DhtNode, PeerId};
use crate::raft::RaftConfig;
use crate::registry::OpReport;
use crate::sim::{Ctx, FaultSchedule, FaultScheduleError, LatencyModel, NodeId, Process, SimError, SimTime, Simulation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

macro_rules! dht_env {
    ($env:expr) => {
        $env.scoped($crate::network::NetMsg::Dht, $crate::network::NetTimer::Dht)
    };
}
pub(crate) use dht_env;

/// Protocol timing and sizing shared by every node.
#[derive(Clone, Debug)]
pub struct NetParams {
    pub bootstrap: Vec<NodeId>,
    pub dht: DhtConfig,
    pub raft: RaftConfig,
    pub request_timeout_ms: u64,
    pub retry_backoff_ms: u64,
    /// Mean period of a peer's self-lookup.
    pub refresh_ms: u64,
    pub max_attempts: u32,
    pub ping_timeout_ms: u64,
    /// Tracker replicas per dataset.
    pub replicas: usize,
    pub maintain_ms: u64,
    /// Follower silence after which the leader treats a member as dead.
    pub dead_after_ms: u64,
    pub creator_poll_ms: u64,
    pub snapshot_period_ms: u64,
    /// Leaders push a snapshot to the creator at every multiple of this version.
    pub snapshot_every: u64,
    pub audit_ms: u64,
    /// How long a group must be unreachable before the dataset is declared lost.
    pub lost_grace_ms: u64,
    /// Chunk requests in flight per download.
    pub download_window: usize,
}

impl NetParams {
    pub fn for_latency(bootstrap: Vec<NodeId>, max_base_ms: f64) -> Self {
        let dht = DhtConfig::for_max_latency(max_base_ms);
        let rtt = (2.0 * max_base_ms * 1.5).ceil() as u64;
        NetParams {
            bootstrap,
            dht,
            raft: RaftConfig::default(),
            request_timeout_ms: (4 * rtt).max(400),
            retry_backoff_ms: 100,
            refresh_ms: 30_000,
            max_attempts: 80,
            ping_timeout_ms: (2 * rtt).max(50),
            replicas: 3,
            maintain_ms: 250,
            dead_after_ms: (6 * rtt).max(600),
            creator_poll_ms: 5_000,
            snapshot_period_ms: 500_000,
            snapshot_every: 10,
            audit_ms: 5_000,
            lost_grace_ms: 20_000,
            download_window: 8,
        }
    }
}

#[derive(Debug)]
pub enum HydraNode {
    Bootstrap(Box<BootstrapServer>),
    Peer(Box<PeerNode>),
}

impl HydraNode {
    pub fn as_peer(&self) -> Option<&PeerNode> {
        match self {
            HydraNode::Peer(p) => Some(p),
            HydraNode::Bootstrap(_) => None,
        }
    }

    pub fn as_peer_mut(&mut self) -> Option<&mut PeerNode> {
        match self {
            HydraNode::Peer(p) => Some(p),
            HydraNode::Bootstrap(_) => None,
        }
    }

    pub fn as_bootstrap(&self) -> Option<&BootstrapServer> {
        match self {
            HydraNode::Bootstrap(b) => Some(b),
            HydraNode::Peer(_) => None,
        }
    }
}

impl Process for HydraNode {
    type Msg = NetMsg;
    type Timer = NetTimer;

    fn on_start(&mut self, ctx: &mut Ctx<'_, NetMsg, NetTimer>) {
        match self {
            HydraNode::Bootstrap(b) => b.on_start(ctx),
            HydraNode::Peer(p) => p.on_start(ctx),
        }
    }

    fn on_message(&mut self, ctx: &mut Ctx<'_, NetMsg, NetTimer>, from: NodeId, msg: NetMsg) {
        match self {
            HydraNode::Bootstrap(b) => b.on_message(ctx, from, msg),
            HydraNode::Peer(p) => p.on_message(ctx, from, msg),
        }
    }

    fn on_timer(&mut self, ctx: &mut Ctx<'_, NetMsg, NetTimer>, timer: NetTimer) {
        match self {
            HydraNode::Bootstrap(b) => b.on_timer(ctx, timer),
            HydraNode::Peer(p) => p.on_timer(ctx, timer),
        }
    }

    fn on_crash(&mut self) {
        if let HydraNode::Peer(p) = self {
            p.on_crash();
        }
    }

    fn on_restart(&mut self, ctx: &mut Ctx<'_, NetMsg, NetTimer>) {
        if let HydraNode::Peer(p) = self {
            p.on_restart(ctx);
        }
    }
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("need at least one bootstrap server")]
    NoBootstrap,
    #[error("latency matrix covers {got} nodes, network has {want}")]
    LatencySize { got: usize, want: usize },
    #[error("invalid fault schedule: {0}")]
    Faults(#[from] FaultScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Construction parameters for a [`Network`].
#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub bootstrap_servers: usize,
    pub peers: Vec<PeerProfile>,
    pub latency: LatencyModel,
    pub seed: u64,
    pub rates: Rates,
    /// Seconds-free reference step time of a bootstrap server, in ms per sample.
    pub reference_ms: f64,
    pub params: Option<NetParams>,
}

impl NetworkConfig {
    /// `peers` identical peers joining `join_interval_ms` apart, planar latencies.
    pub fn uniform(bootstrap_servers: usize, peers: usize, join_interval_ms: u64, seed: u64) -> Self {
        let n = bootstrap_servers + peers;
        let latency = LatencyModel::planar(n, 2.0, 20.0, 0.1, seed ^ 0x9e37_79b9);
        let peers = (0..peers)
            .map(|i| PeerProfile { join_at_ms: i as u64 * join_interval_ms, ..PeerProfile::default() })
            .collect();
        NetworkConfig {
            bootstrap_servers,
            peers,
            latency,
            seed,
            rates: Rates::default(),
            reference_ms: 100.0,
            params: None,
        }
    }
}

/// A whole simulated network plus convenience drivers.
pub struct Network {
    pub sim: Simulation<HydraNode>,
    params: NetParams,
    bootstrap: Vec<NodeId>,
    peers: Vec<NodeId>,
}

impl Network {
    pub fn build(cfg: NetworkConfig) -> Result<Self, NetworkError> {
        if cfg.bootstrap_servers == 0 {
            return Err(NetworkError::NoBootstrap);
        }
        let n = cfg.bootstrap_servers + cfg.peers.len();
        if cfg.latency.len() != n {
            return Err(NetworkError::LatencySize { got: cfg.latency.len(), want: n });
        }
        let bootstrap: Vec<NodeId> = (0..cfg.bootstrap_servers as u32).map(NodeId).collect();
        let peers: Vec<NodeId> = (cfg.bootstrap_servers as u32..n as u32).map(NodeId).collect();
        let params = cfg
            .params
            .clone()
            .unwrap_or_else(|| NetParams::for_latency(bootstrap.clone(), cfg.latency.max_base()));
        let mut id_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb007);
        let mut nodes = Vec::with_capacity(n);
        for (i, b) in bootstrap.iter().enumerate() {
            let table_id = PeerId::random(&mut id_rng);
            let dht = DhtNode::new(Contact { peer_id: table_id, address: *b }, params.dht.clone());
            let state = BootstrapState::new(cfg.seed.wrapping_add(0x1d), cfg.reference_ms);
            let ledger = (i == 0).then(|| Ledger::new(cfg.rates.clone()));
            nodes.push(HydraNode::Bootstrap(Box::new(BootstrapServer::new(*b, params.clone(), state, dht, ledger))));
        }
        for (id, profile) in peers.iter().zip(cfg.peers.iter()) {
            nodes.push(HydraNode::Peer(Box::new(PeerNode::new(*id, params.clone(), profile.clone()))));
        }
        let sim = Simulation::new(nodes, cfg.latency, cfg.seed);
        Ok(Network { sim, params, bootstrap, peers })
    }

    pub fn params(&self) -> &NetParams {
        &self.params
    }

    pub fn bootstrap_nodes(&self) -> &[NodeId] {
        &self.bootstrap
    }

    pub fn peer_nodes(&self) -> &[NodeId] {
        &self.peers
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub fn peer(&self, id: NodeId) -> &PeerNode {
        self.sim.node(id).as_peer().expect("not a peer node")
    }

    pub fn server(&self, index: usize) -> &BootstrapServer {
        self.sim.node(self.bootstrap[index]).as_bootstrap().expect("not a bootstrap node")
    }

    pub fn ledger(&self) -> &Ledger {
        self.server(0).ledger.as_ref().expect("primary owns the ledger")
    }

    /// The primary's ledger, for postings made outside the message flow
    /// while the simulation is paused.
    pub fn ledger_mut(&mut self) -> &mut Ledger {
        match self.sim.node_mut(self.bootstrap[0]) {
            HydraNode::Bootstrap(b) => b.ledger.as_mut().expect("primary owns the ledger"),
            HydraNode::Peer(_) => unreachable!("node 0 is a bootstrap server"),
        }
    }

    pub fn load_faults(&mut self, schedule: &FaultSchedule) -> Result<(), NetworkError> {
        schedule.check_protected(&self.bootstrap)?;
        self.sim.load_faults(schedule);
        Ok(())
    }

    pub fn run_for(&mut self, ms: u64) -> Result<(), NetworkError> {
        self.sim.run_for(ms)?;
        Ok(())
    }

    /// Runs until every online peer has joined the DHT, checking every
    /// 50 ms of simulated time.
    pub fn run_until_registered(&mut self, deadline: SimTime) -> Result<bool, NetworkError> {
        loop {
            let done = self
                .peers
                .iter()
                .all(|p| !self.sim.is_online(*p) || self.peer(*p).is_registered());
            if done {
                return Ok(true);
            }
            if self.now() >= deadline {
                return Ok(false);
            }
            let slice = (deadline.0 - self.now().0).min(50);
            self.sim.run_for(slice)?;
        }
    }

    /// Runs until `node` reports on `op`, or the deadline passes.
    pub fn wait_report(&mut self, node: NodeId, op: u64, deadline: SimTime) -> Result<Option<OpReport>, NetworkError> {
        self.sim
            .run_until_cond(deadline, |sim| sim.node(node).as_peer().is_some_and(|p| p.report(op).is_some()))?;
        Ok(self.peer(node).report(op).cloned())
    }

    fn with_peer<R>(
        &mut self,
        node: NodeId,
        f: impl FnOnce(&mut PeerNode, &mut Ctx<'_, NetMsg, NetTimer>) -> R,
    ) -> Option<R> {
        self.sim.with_node(node, |n, ctx| n.as_peer_mut().map(|p| f(p, ctx))).flatten()
    }

    pub fn create_dataset(&mut self, node: NodeId, title: &str) -> Option<u64> {
        self.with_peer(node, |p, ctx| p.create_dataset(ctx, title))
    }

    pub fn contribute(&mut self, node: NodeId, title: &str, files: Vec<(String, u64)>) -> Option<u64> {
        self.with_peer(node, |p, ctx| p.contribute(ctx, title, files))
    }

    pub fn find_node(&mut self, node: NodeId, target: PeerId) -> Option<u64> {
        self.with_peer(node, |p, ctx| p.find_node(ctx, target))
    }

    pub fn download(&mut self, node: NodeId, title: &str) -> Option<u64> {
        self.with_peer(node, |p, ctx| p.download(ctx, title))
    }

    /// Awards a scripted validation or annotation reward through the ledger owner.
    pub fn scripted_award(&mut self, node: NodeId, call: CoinCall) -> Option<()> {
        self.with_peer(node, |p, ctx| p.boot_call(ctx, BootCall::Coin(call), BootPurpose::Fire))
    }

    /// Peers hosting any replica of `hash`, current member or not.
    pub fn hosts(&self, hash: PeerId) -> Vec<NodeId> {
        self.peers
            .iter()
            .copied()
            .filter(|p| self.peer(*p).tracker(&hash).is_some())
            .collect()
    }

    /// Group membership as seen by the current leader of `hash`.
    pub fn replicas(&self, hash: PeerId) -> Vec<NodeId> {
        self.tracker_leader(hash)
            .and_then(|l| self.peer(l).tracker(&hash))
            .map(|r| r.members().to_vec())
            .unwrap_or_default()
    }

    /// The online node that currently leads the newest incarnation of `hash`'s group.
    pub fn tracker_leader(&self, hash: PeerId) -> Option<NodeId> {
        let mut best: Option<(u32, u64, NodeId)> = None;
        for p in &self.peers {
            if !self.sim.is_online(*p) {
                continue;
            }
            if let Some(r) = self.peer(*p).tracker(&hash) {
                if r.raft().is_leader() {
                    let key = (r.incarnation(), r.raft().term(), *p);
                    if best.is_none_or(|b| (key.0, key.1) > (b.0, b.1)) {
                        best = Some(key);
                    }
                }
            }
        }
        best.map(|b| b.2)
    }
}
