use crate::bootstrap::{BootUpdate, LeaderReport};
use crate::coin::{Basis, Coin, RewardKind};
use crate::dht::{Contact, DhtMsg, DhtTimer, PeerId};
use crate::raft::{LogEntry, RaftMsg, RaftTimer};
use crate::registry::{DatasetMeta, FileChunk, TrackerCommand};
use crate::sim::NodeId;

pub type ReqId = u64;

#[derive(Clone, Debug)]
pub enum CoinCall {
    Award { kind: RewardKind, peer: PeerId, basis: Basis, dataset: Option<PeerId>, key: String },
    Penalize { peer: PeerId, amount: Coin, key: String },
}

/// Requests a peer (or a non-primary server) sends to a bootstrap server.
#[derive(Clone, Debug)]
pub enum BootCall {
    RegisterPeer,
    /// Id issuance, forwarded by a non-primary server to the primary.
    IssueId { node: NodeId },
    ListDatasets,
    RegisterDataset { title: String, hash: PeerId, leader: NodeId, creator: Contact },
    UpdateLeader { hash: PeerId, report: LeaderReport },
    GetLeader { hash: PeerId },
    LivenessPoll { hash: PeerId },
    Coin(CoinCall),
}

impl BootCall {
    /// Calls that change replicated state and so run on the primary.
    pub fn is_write(&self) -> bool {
        matches!(
            self,
            BootCall::IssueId { .. }
                | BootCall::RegisterDataset { .. }
                | BootCall::UpdateLeader { .. }
                | BootCall::Coin(_)
        )
    }
}

#[derive(Clone, Debug)]
pub enum BootAnswer {
    Registered { peer_id: PeerId, seeds: Vec<Contact> },
    Issued { peer_id: PeerId },
    Datasets(Vec<(String, PeerId, NodeId)>),
    Leader { leader: NodeId, incarnation: u32 },
    Liveness { live: Vec<NodeId>, incarnation: u32 },
    Ack,
    Error(String),
}

/// Requests to a tracker replica.
#[derive(Clone, Debug)]
pub enum TrackerCall {
    /// Start (or reboot) the group for `meta.hash` with this node as first member.
    Create { meta: DatasetMeta, incarnation: u32 },
    GetPeers,
    Submit(TrackerCommand),
}

#[derive(Clone, Debug)]
pub enum TrackerAnswer {
    Created { leader: NodeId },
    Refused(String),
    NotLeader { hint: Option<NodeId> },
    View(DatasetMeta),
    Committed { changed: bool, meta: DatasetMeta },
    Rejected(String),
    Unknown,
}

#[derive(Clone, Debug)]
pub enum NetMsg {
    Dht(DhtMsg),
    BootReq { id: ReqId, call: BootCall },
    BootResp { id: ReqId, answer: BootAnswer },
    Replicate { op: u64, update: BootUpdate },
    ReplicateAck { op: u64 },
    Raft { hash: PeerId, incarnation: u32, msg: RaftMsg<TrackerCommand> },
    TrackerReq { id: ReqId, hash: PeerId, call: TrackerCall },
    TrackerResp { id: ReqId, answer: TrackerAnswer },
    StateTransfer {
        hash: PeerId,
        title: String,
        creator: Contact,
        incarnation: u32,
        term: u64,
        initial_members: Vec<NodeId>,
        log: Vec<LogEntry<TrackerCommand>>,
    },
    StateTransferAck { hash: PeerId, incarnation: u32, accepted: bool },
    Snapshot { meta: DatasetMeta, taken_at: u64 },
    GetChunk { id: ReqId, hash: PeerId, filename: String, offset: u64, length: u64 },
    Chunk { id: ReqId, chunk: Option<FileChunk> },
    Ping { nonce: u64 },
    Pong { nonce: u64 },
}

#[derive(Clone, Debug)]
pub enum NetTimer {
    Dht(DhtTimer),
    Raft { hash: PeerId, incarnation: u32, timer: RaftTimer },
    /// Reply deadline for an outstanding request.
    Request { id: ReqId },
    Register,
    /// Periodic self-lookup keeping near neighbours known.
    Refresh,
    Maintain { hash: PeerId },
    SnapshotPoll { hash: PeerId },
    CreatorPoll { hash: PeerId },
    PingDeadline { poll: u64 },
    Audit,
}
