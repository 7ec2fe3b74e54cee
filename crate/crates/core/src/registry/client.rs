//! Client-side dataset operations run by a peer: create, contribute, download,
//! and serving chunks to other downloaders.

use super::meta::{chunk_payload, chunk_ranges, dataset_hash, DatasetMeta, FileChunk, TrackerCommand};
use crate::coin::{Basis, RewardKind};
use crate::dht::{xor_distance, Contact, LookupResult, PeerId};
use crate::multitracker::{CreatorSnapshot, CreatorWatch};
use crate::network::{
    dht_env, BootAnswer, BootCall, BootPurpose, CallPurpose, CoinCall, LookupPurpose, NetMsg, NetTimer, Outstanding,
    PeerNode, ReqId, TrackerAnswer, TrackerCall,
};
use crate::sim::{Env, NodeId};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Outcome of a client operation, recorded on the peer that ran it.
#[derive(Clone, Debug, PartialEq)]
pub enum OpReport {
    Created { title: String, hash: PeerId, leader: NodeId },
    Rebooted { hash: PeerId, leader: NodeId, version: u64 },
    Contributed { hash: PeerId, version: u64 },
    Downloaded(DownloadReport),
    /// A plain lookup finished; `found` is the target's contact if it exists.
    Located { target: PeerId, found: Option<Contact>, rounds: u32 },
    Failed { what: String, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownloadReport {
    pub hash: PeerId,
    /// Files now held locally, including ones held before the download.
    pub complete: Vec<String>,
    /// Files whose every holder failed.
    pub unavailable: Vec<String>,
    /// Payload bytes received.
    pub bytes: u64,
    /// Bytes received from each serving holder.
    pub per_holder: BTreeMap<PeerId, u64>,
    /// Some files could not be fetched, so the dataset is smaller than listed.
    pub reduced: bool,
}

/// In-progress client operation (volatile).
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Place(Box<PlaceOp>),
    Contribute { hash: PeerId },
    Download(Box<DownloadOp>),
}

/// Choosing and starting a tracker leader, for a new dataset or a reboot.
#[derive(Clone, Debug)]
pub(crate) struct PlaceOp {
    pub meta: DatasetMeta,
    pub incarnation: u32,
    pub reboot: bool,
    pub candidates: Vec<Contact>,
    pub next: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Stage {
    Resolving,
    Registering,
    Transferring,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum FileState {
    Fetching,
    Complete,
    Unavailable,
}

#[derive(Clone, Debug)]
struct FileFetch {
    name: String,
    size: u64,
    pending: VecDeque<(u64, u64)>,
    inflight: usize,
    holders: Vec<Contact>,
    failed: BTreeSet<PeerId>,
    next_holder: usize,
    state: FileState,
}

impl FileFetch {
    /// Next live holder, round-robin.
    fn pick_holder(&mut self) -> Option<Contact> {
        let n = self.holders.len();
        for i in 0..n {
            let h = self.holders[(self.next_holder + i) % n];
            if !self.failed.contains(&h.peer_id) {
                self.next_holder = (self.next_holder + i + 1) % n;
                return Some(h);
            }
        }
        None
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DownloadOp {
    hash: PeerId,
    /// Durable sequence number identifying this download in reward keys.
    tag: u64,
    stage: Stage,
    sources: Option<DatasetMeta>,
    files: Vec<FileFetch>,
    inflight: usize,
    bytes: u64,
    per_holder: BTreeMap<PeerId, u64>,
}

impl PeerNode {
    fn report_op(&mut self, op: u64, report: OpReport) {
        self.ops.remove(&op);
        self.reports.push((op, report));
    }

    fn fail_op(&mut self, op: u64, what: &str, reason: impl Into<String>) {
        self.report_op(op, OpReport::Failed { what: what.into(), reason: reason.into() });
    }

    /// Stores a tracker's metadata as this peer's view, plus whatever it holds locally.
    pub(crate) fn adopt_view(&mut self, meta: DatasetMeta) {
        let hash = meta.hash;
        if self.views.get(&hash).is_some_and(|v| v.version > meta.version) {
            return;
        }
        let mut view = meta;
        if let Some(me) = self.contact() {
            for (h, name) in self.store.keys() {
                if *h == hash {
                    view.note_holder(name, me);
                }
            }
        }
        self.views.insert(hash, view);
    }

    fn award<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, kind: RewardKind, peer: PeerId, basis: Basis, dataset: PeerId, key: String) {
        let call = CoinCall::Award { kind, peer, basis, dataset: Some(dataset), key };
        self.boot_call(env, BootCall::Coin(call), BootPurpose::Fire);
    }

    /// Creates a dataset. The tracker leader is the peer closest to the title hash.
    pub fn create_dataset<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, title: &str) -> u64 {
        let op = self.fresh_id();
        let Some(me) = self.contact() else {
            self.fail_op(op, "create", "not registered");
            return op;
        };
        let meta = DatasetMeta::new(title, me);
        self.start_place(env, op, PlaceOp { meta, incarnation: 1, reboot: false, candidates: Vec::new(), next: 0 });
        op
    }

    /// Looks up `target` in the DHT.
    pub fn find_node<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, target: PeerId) -> u64 {
        let op = self.fresh_id();
        let width = self.params.dht.fan_out;
        let Some(dht) = self.dht.as_mut() else {
            self.fail_op(op, "lookup", "not registered");
            return op;
        };
        let q = dht.start_lookup(&mut dht_env!(env), target, width, None);
        self.lookups.insert(q, LookupPurpose::Locate(op));
        self.drain_lookups(env);
        op
    }

    pub(crate) fn start_place<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64, place: PlaceOp) {
        let hash = place.meta.hash;
        let width = self.params.dht.fan_out + self.params.replicas;
        self.ops.insert(op, Op::Place(Box::new(place)));
        let dht = self.dht.as_mut().expect("registered peer has a table");
        let q = dht.start_lookup(&mut dht_env!(env), hash, width, None);
        self.lookups.insert(q, LookupPurpose::Place(op));
        self.drain_lookups(env);
    }

    pub(crate) fn on_place_lookup<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64, result: LookupResult) {
        let Some(me) = self.contact() else {
            return;
        };
        let bootstrap = self.params.bootstrap.clone();
        let Some(Op::Place(place)) = self.ops.get_mut(&op) else {
            return;
        };
        let hash = place.meta.hash;
        let mut candidates: Vec<Contact> =
            result.responders.into_iter().filter(|c| !bootstrap.contains(&c.address)).collect();
        if !candidates.iter().any(|c| c.peer_id == me.peer_id) {
            candidates.push(me);
        }
        candidates.sort_by_key(|c| (xor_distance(c.peer_id, hash), c.peer_id));
        place.candidates = candidates;
        if place.reboot {
            self.send_create(env, op);
        } else {
            let call = BootCall::RegisterDataset {
                title: place.meta.title.clone(),
                hash,
                leader: place.candidates[0].address,
                creator: me,
            };
            self.boot_call(env, call, BootPurpose::DatasetRegistered(op));
        }
    }

    pub(crate) fn on_dataset_registered<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64, answer: BootAnswer) {
        match answer {
            BootAnswer::Ack => self.send_create(env, op),
            BootAnswer::Error(e) => self.fail_op(op, "create", e),
            other => self.fail_op(op, "create", format!("unexpected answer {other:?}")),
        }
    }

    fn send_create<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64) {
        let Some(Op::Place(place)) = self.ops.get_mut(&op) else {
            return;
        };
        let Some(cand) = place.candidates.get(place.next).copied() else {
            let what = if place.reboot { "reboot" } else { "create" };
            if place.reboot {
                let hash = place.meta.hash;
                if let Some(w) = self.watches.get_mut(&hash) {
                    w.rebooting = false;
                }
            }
            self.fail_op(op, what, "no tracker candidate accepted");
            return;
        };
        place.next += 1;
        let call = TrackerCall::Create { meta: place.meta.clone(), incarnation: place.incarnation };
        let hash = place.meta.hash;
        let id = self.fresh_id();
        env.send(cand.address, NetMsg::TrackerReq { id, hash, call });
        let wait = self.params.request_timeout_ms + 2 * self.params.raft.election_max_ms;
        env.set_timer(wait, NetTimer::Request { id });
        self.requests.insert(id, Outstanding::Create { op });
    }

    pub(crate) fn on_create_answer<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64, answer: TrackerAnswer) {
        let TrackerAnswer::Created { leader } = answer else {
            self.send_create(env, op);
            return;
        };
        let Some(Op::Place(place)) = self.ops.get(&op).cloned() else {
            return;
        };
        let hash = place.meta.hash;
        self.leader_cache.insert(hash, leader);
        if place.reboot {
            if let Some(w) = self.watches.get_mut(&hash) {
                w.incarnation = place.incarnation;
                w.rebooting = false;
            }
            env.metric("tracker_rebooted", place.meta.version as f64);
            self.report_op(op, OpReport::Rebooted { hash, leader, version: place.meta.version });
        } else {
            let snapshot = CreatorSnapshot { hash, meta: place.meta.clone(), taken_at: env.now() };
            self.watches.insert(hash, CreatorWatch::new(&place.meta.title, hash, place.incarnation, snapshot));
            env.set_timer(self.params.creator_poll_ms, NetTimer::CreatorPoll { hash });
            env.set_timer(self.params.snapshot_period_ms, NetTimer::SnapshotPoll { hash });
            self.report_op(op, OpReport::Created { title: place.meta.title.clone(), hash, leader });
        }
    }

    pub(crate) fn on_create_timeout<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64) {
        self.send_create(env, op);
    }

    /// Adds local files to a dataset. The peer becomes a holder of each.
    pub fn contribute<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, title: &str, files: Vec<(String, u64)>) -> u64 {
        let op = self.fresh_id();
        let hash = dataset_hash(title);
        let Some(me) = self.contact() else {
            self.fail_op(op, "contribute", "not registered");
            return op;
        };
        for (name, size) in &files {
            self.store.insert((hash, name.clone()), *size);
        }
        let seq = self.next_seq();
        self.ops.insert(op, Op::Contribute { hash });
        let cmd = TrackerCommand::Contribute { client: me, seq, files };
        self.leader_call(env, hash, TrackerCall::Submit(cmd), CallPurpose::Op(op));
        op
    }

    /// Fetches every file of a dataset from its holders.
    pub fn download<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, title: &str) -> u64 {
        let op = self.fresh_id();
        let hash = dataset_hash(title);
        if self.contact().is_none() {
            self.fail_op(op, "download", "not registered");
            return op;
        }
        let tag = self.next_seq();
        let d = DownloadOp {
            hash,
            tag,
            stage: Stage::Resolving,
            sources: None,
            files: Vec::new(),
            inflight: 0,
            bytes: 0,
            per_holder: BTreeMap::new(),
        };
        self.ops.insert(op, Op::Download(Box::new(d)));
        self.leader_call(env, hash, TrackerCall::GetPeers, CallPurpose::Op(op));
        op
    }

    pub(crate) fn on_op_call_done<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        op: u64,
        result: Result<TrackerAnswer, String>,
    ) {
        match self.ops.get(&op) {
            Some(Op::Contribute { hash }) => {
                let hash = *hash;
                self.on_contribute_done(env, op, hash, result)
            }
            Some(Op::Download(_)) => self.on_download_call(env, op, result),
            Some(Op::Place(_)) | None => {}
        }
    }

    fn on_contribute_done<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        op: u64,
        hash: PeerId,
        result: Result<TrackerAnswer, String>,
    ) {
        match result {
            Ok(TrackerAnswer::Committed { meta, .. }) => {
                let me = self.contact().expect("registered");
                let mine: Vec<(String, u64)> = meta
                    .files
                    .iter()
                    .filter(|f| f.holds(me.peer_id))
                    .map(|f| (f.filename.clone(), f.size_bytes))
                    .collect();
                for (name, size) in mine {
                    if self.store.contains_key(&(hash, name.clone())) {
                        let key = format!("contribution/{}/{}/{}", hash.to_hex(), me.peer_id.to_hex(), name);
                        self.award(env, RewardKind::Contribution, me.peer_id, Basis::Bytes(size), hash, key);
                    }
                }
                let version = meta.version;
                self.adopt_view(meta);
                self.report_op(op, OpReport::Contributed { hash, version });
            }
            Ok(TrackerAnswer::Rejected(r)) => self.fail_op(op, "contribute", r),
            Ok(TrackerAnswer::Unknown) => self.fail_op(op, "contribute", "unknown dataset"),
            Ok(other) => self.fail_op(op, "contribute", format!("unexpected answer {other:?}")),
            Err(e) => self.fail_op(op, "contribute", e),
        }
    }

    fn on_download_call<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64, result: Result<TrackerAnswer, String>) {
        let Some(Op::Download(d)) = self.ops.get(&op) else {
            return;
        };
        let (hash, stage) = (d.hash, d.stage.clone());
        let me = self.contact().expect("registered");
        match (stage, result) {
            (Stage::Resolving, Ok(TrackerAnswer::View(meta))) => {
                let mut sources = meta.clone();
                if let Some(old) = self.views.get(&hash).cloned() {
                    if old.version > meta.version || !old.holder_set().is_subset(&meta.holder_set()) {
                        sources.merge(&old);
                        let seq = self.next_seq();
                        let cmd = TrackerCommand::MergeView { client: me, seq, view: old };
                        self.leader_call(env, hash, TrackerCall::Submit(cmd), CallPurpose::Background);
                        env.metric("view_merge_submitted", 1.0);
                    }
                }
                self.adopt_view(meta);
                let seq = self.next_seq();
                if let Some(Op::Download(d)) = self.ops.get_mut(&op) {
                    d.sources = Some(sources);
                    d.stage = Stage::Registering;
                }
                let cmd = TrackerCommand::AddDownloader { client: me, seq };
                self.leader_call(env, hash, TrackerCall::Submit(cmd), CallPurpose::Op(op));
            }
            (Stage::Registering, Ok(TrackerAnswer::Committed { meta, .. })) => {
                self.adopt_view(meta.clone());
                let store = &self.store;
                let Some(Op::Download(d)) = self.ops.get_mut(&op) else {
                    return;
                };
                let mut sources = d.sources.take().unwrap_or_else(|| meta.clone());
                sources.merge(&meta);
                d.files = sources
                    .files
                    .iter()
                    .map(|f| {
                        let held = store.contains_key(&(hash, f.filename.clone()));
                        FileFetch {
                            name: f.filename.clone(),
                            size: f.size_bytes,
                            pending: if held { VecDeque::new() } else { chunk_ranges(f.size_bytes).into() },
                            inflight: 0,
                            holders: f.holders.iter().copied().filter(|h| h.peer_id != me.peer_id).collect(),
                            failed: BTreeSet::new(),
                            next_holder: 0,
                            state: if held { FileState::Complete } else { FileState::Fetching },
                        }
                    })
                    .collect();
                d.stage = Stage::Transferring;
                let zero_sized: Vec<usize> = d
                    .files
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| f.state == FileState::Fetching && f.pending.is_empty())
                    .map(|(i, _)| i)
                    .collect();
                for i in zero_sized {
                    self.complete_file(env, op, i);
                }
                self.pump_download(env, op);
            }
            (_, Ok(TrackerAnswer::Unknown)) => self.fail_op(op, "download", "unknown dataset"),
            (_, Ok(TrackerAnswer::Rejected(r))) => self.fail_op(op, "download", r),
            (_, Err(e)) => self.fail_op(op, "download", e),
            (_, Ok(other)) => self.fail_op(op, "download", format!("unexpected answer {other:?}")),
        }
    }

    /// Keeps up to `download_window` chunk requests in flight.
    fn pump_download<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64) {
        let window = self.params.download_window;
        loop {
            let Some(Op::Download(d)) = self.ops.get_mut(&op) else {
                return;
            };
            if d.inflight >= window {
                return;
            }
            let hash = d.hash;
            let mut request = None;
            for (i, f) in d.files.iter_mut().enumerate() {
                if f.state != FileState::Fetching || f.pending.is_empty() {
                    continue;
                }
                match f.pick_holder() {
                    Some(holder) => {
                        let (offset, length) = f.pending.pop_front().expect("non-empty");
                        f.inflight += 1;
                        request = Some((i, f.name.clone(), offset, length, holder));
                        break;
                    }
                    None if f.inflight == 0 => {
                        f.pending.clear();
                        f.state = FileState::Unavailable;
                    }
                    None => {}
                }
            }
            let Some((file, filename, offset, length, holder)) = request else {
                break;
            };
            d.inflight += 1;
            let id = self.fresh_id();
            env.send(holder.address, NetMsg::GetChunk { id, hash, filename, offset, length });
            env.set_timer(self.params.request_timeout_ms, NetTimer::Request { id });
            self.requests.insert(id, Outstanding::Chunk { op, file, offset, length, holder });
        }
        let Some(Op::Download(d)) = self.ops.get(&op) else {
            return;
        };
        if d.inflight == 0 && d.files.iter().all(|f| f.state != FileState::Fetching) {
            self.finish_download(env, op);
        }
    }

    fn complete_file<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64, file: usize) {
        let Some(Op::Download(d)) = self.ops.get_mut(&op) else {
            return;
        };
        let hash = d.hash;
        let f = &mut d.files[file];
        f.state = FileState::Complete;
        let (name, size) = (f.name.clone(), f.size);
        self.store.insert((hash, name.clone()), size);
        let me = self.contact().expect("registered");
        if let Some(v) = self.views.get_mut(&hash) {
            v.note_holder(&name, me);
        }
        let seq = self.next_seq();
        let cmd = TrackerCommand::CompleteFile { client: me, seq, filename: name };
        self.leader_call(env, hash, TrackerCall::Submit(cmd), CallPurpose::Background);
        env.metric("file_downloaded", size as f64);
    }

    fn finish_download<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, op: u64) {
        let Some(Op::Download(d)) = self.ops.remove(&op) else {
            return;
        };
        let me = self.contact().expect("registered");
        for (holder, bytes) in &d.per_holder {
            let key = format!("seeding/{}/{}/{}/{}", d.hash.to_hex(), me.peer_id.to_hex(), d.tag, holder.to_hex());
            self.award(env, RewardKind::Seeding, *holder, Basis::Bytes(*bytes), d.hash, key);
        }
        let complete: Vec<String> =
            d.files.iter().filter(|f| f.state == FileState::Complete).map(|f| f.name.clone()).collect();
        let unavailable: Vec<String> =
            d.files.iter().filter(|f| f.state == FileState::Unavailable).map(|f| f.name.clone()).collect();
        if !unavailable.is_empty() {
            env.metric("download_reduced", unavailable.len() as f64);
        }
        let report = DownloadReport {
            hash: d.hash,
            reduced: !unavailable.is_empty(),
            complete,
            unavailable,
            bytes: d.bytes,
            per_holder: d.per_holder,
        };
        self.reports.push((op, OpReport::Downloaded(report)));
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn serve_chunk<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        from: NodeId,
        id: ReqId,
        hash: PeerId,
        filename: String,
        offset: u64,
        length: u64,
    ) {
        let chunk = match self.store.get(&(hash, filename.clone())) {
            Some(size) if offset.checked_add(length).is_some_and(|end| end <= *size) => {
                let payload = chunk_payload(hash, &filename, offset, length);
                Some(FileChunk { filename, offset, length, payload })
            }
            _ => None,
        };
        env.send(from, NetMsg::Chunk { id, chunk });
    }

    pub(crate) fn on_chunk<E: Env<NetMsg, NetTimer>>(&mut self, env: &mut E, id: ReqId, chunk: Option<FileChunk>) {
        let Some(Outstanding::Chunk { op, file, offset, length, holder }) = self.requests.remove(&id) else {
            return;
        };
        let Some(Op::Download(d)) = self.ops.get_mut(&op) else {
            return;
        };
        let hash = d.hash;
        let f = &d.files[file];
        let valid = chunk.is_some_and(|c| {
            c.filename == f.name
                && c.offset == offset
                && c.length == length
                && c.payload == chunk_payload(hash, &f.name, offset, length)
        });
        if !valid {
            self.on_chunk_failed(env, op, file, offset, length, holder);
            return;
        }
        d.inflight -= 1;
        d.bytes += length;
        *d.per_holder.entry(holder.peer_id).or_default() += length;
        let f = &mut d.files[file];
        f.inflight -= 1;
        if f.pending.is_empty() && f.inflight == 0 && f.state == FileState::Fetching {
            self.complete_file(env, op, file);
        }
        self.pump_download(env, op);
    }

    pub(crate) fn on_chunk_failed<E: Env<NetMsg, NetTimer>>(
        &mut self,
        env: &mut E,
        op: u64,
        file: usize,
        offset: u64,
        length: u64,
        holder: Contact,
    ) {
        let Some(Op::Download(d)) = self.ops.get_mut(&op) else {
            return;
        };
        d.inflight -= 1;
        let f = &mut d.files[file];
        f.inflight -= 1;
        f.failed.insert(holder.peer_id);
        f.pending.push_front((offset, length));
        env.metric("chunk_failed", 1.0);
        self.pump_download(env, op);
    }
}
