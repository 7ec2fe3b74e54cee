use crate::dht::{Contact, PeerId};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub const CHUNK_SIZE: u64 = 64 * 1024;

/// Key under which a dataset is tracked: SHA-256 of its title.
pub fn dataset_hash(title: &str) -> PeerId {
    PeerId::sha256(title.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub filename: String,
    pub size_bytes: u64,
    pub holders: Vec<Contact>,
}

impl FileEntry {
    pub fn holds(&self, peer: PeerId) -> bool {
        self.holders.iter().any(|c| c.peer_id == peer)
    }

    fn add_holder(&mut self, c: Contact) -> bool {
        if let Some(h) = self.holders.iter_mut().find(|h| h.peer_id == c.peer_id) {
            h.address = c.address;
            return false;
        }
        self.holders.push(c);
        true
    }

    pub fn chunk_count(&self) -> u64 {
        self.size_bytes.div_ceil(CHUNK_SIZE)
    }
}

/// A byte range of a file with its synthetic payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChunk {
    pub filename: String,
    pub offset: u64,
    pub length: u64,
    pub payload: Vec<u8>,
}

/// Deterministic synthetic content for a file range.
pub fn chunk_payload(dataset: PeerId, filename: &str, offset: u64, length: u64) -> Vec<u8> {
    use rand::{RngCore, SeedableRng};
    let mut seed = dataset.0;
    let name = PeerId::sha256(filename.as_bytes());
    for (s, n) in seed.iter_mut().zip(name.0.iter()) {
        *s ^= n;
    }
    seed[..8].iter_mut().zip(offset.to_le_bytes()).for_each(|(s, o)| *s ^= o);
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
    let mut out = vec![0u8; length as usize];
    rng.fill_bytes(&mut out);
    out
}

/// Every `CHUNK_SIZE` slice of a file of `size` bytes, as (offset, length).
pub fn chunk_ranges(size: u64) -> Vec<(u64, u64)> {
    (0..size.div_ceil(CHUNK_SIZE))
        .map(|i| {
            let off = i * CHUNK_SIZE;
            (off, CHUNK_SIZE.min(size - off))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub title: String,
    pub hash: PeerId,
    pub creator: Contact,
    pub files: Vec<FileEntry>,
    pub contributors: Vec<Contact>,
    pub downloaders: Vec<Contact>,
    pub version: u64,
    /// (client, sequence) pairs already applied, for exactly-once retries.
    applied: BTreeSet<(PeerId, u64)>,
}

/// A metadata mutation, replicated through the tracker log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrackerCommand {
    /// Installs the initial (or rebooted) metadata.
    Init(DatasetMeta),
    Contribute { client: Contact, seq: u64, files: Vec<(String, u64)> },
    AddDownloader { client: Contact, seq: u64 },
    CompleteFile { client: Contact, seq: u64, filename: String },
    MergeView { client: Contact, seq: u64, view: DatasetMeta },
}

impl TrackerCommand {
    pub fn client_seq(&self) -> Option<(PeerId, u64)> {
        match self {
            TrackerCommand::Init(_) => None,
            TrackerCommand::Contribute { client, seq, .. }
            | TrackerCommand::AddDownloader { client, seq }
            | TrackerCommand::CompleteFile { client, seq, .. }
            | TrackerCommand::MergeView { client, seq, .. } => Some((client.peer_id, *seq)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Applied {
    Changed,
    Unchanged,
    Duplicate,
    Rejected(String),
}

impl DatasetMeta {
    /// Fresh metadata for a new dataset, at version 1.
    pub fn new(title: &str, creator: Contact) -> Self {
        DatasetMeta {
            title: title.to_string(),
            hash: dataset_hash(title),
            creator,
            files: Vec::new(),
            contributors: Vec::new(),
            downloaders: Vec::new(),
            version: 1,
            applied: BTreeSet::new(),
        }
    }

    pub fn file(&self, name: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.filename == name)
    }

    /// Contributors and downloaders, deduplicated.
    pub fn peers(&self) -> Vec<Contact> {
        let mut out: Vec<Contact> = Vec::new();
        for c in self.contributors.iter().chain(self.downloaders.iter()) {
            if !out.iter().any(|o| o.peer_id == c.peer_id) {
                out.push(*c);
            }
        }
        out
    }

    /// (filename, holder) pairs.
    pub fn holder_set(&self) -> BTreeSet<(String, PeerId)> {
        self.files
            .iter()
            .flat_map(|f| f.holders.iter().map(move |h| (f.filename.clone(), h.peer_id)))
            .collect()
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.size_bytes).sum()
    }

    /// Records `holder` for a file in a client-side view, without a version change.
    pub(crate) fn note_holder(&mut self, filename: &str, holder: Contact) {
        if let Some(f) = self.files.iter_mut().find(|f| f.filename == filename) {
            f.add_holder(holder);
        }
    }

    fn add_unique(list: &mut Vec<Contact>, c: Contact) -> bool {
        if list.iter().any(|x| x.peer_id == c.peer_id) {
            return false;
        }
        list.push(c);
        true
    }

    /// Applies a non-init command. The version advances by one per effective change.
    pub fn apply(&mut self, cmd: &TrackerCommand) -> Applied {
        if let Some(key) = cmd.client_seq() {
            if self.applied.contains(&key) {
                return Applied::Duplicate;
            }
        }
        let outcome = match cmd {
            TrackerCommand::Init(_) => Applied::Rejected("already initialised".into()),
            TrackerCommand::Contribute { client, files, .. } => self.contribute(*client, files),
            TrackerCommand::AddDownloader { client, .. } => {
                if Self::add_unique(&mut self.downloaders, *client) {
                    Applied::Changed
                } else {
                    Applied::Unchanged
                }
            }
            TrackerCommand::CompleteFile { client, filename, .. } => {
                match self.files.iter_mut().find(|f| &f.filename == filename) {
                    Some(f) => {
                        if f.add_holder(*client) {
                            Applied::Changed
                        } else {
                            Applied::Unchanged
                        }
                    }
                    None => Applied::Rejected(format!("no file {filename}")),
                }
            }
            TrackerCommand::MergeView { view, .. } => self.merge(view),
        };
        if let Some(key) = cmd.client_seq() {
            self.applied.insert(key);
        }
        if outcome == Applied::Changed && !matches!(cmd, TrackerCommand::MergeView { .. }) {
            self.version += 1;
        }
        outcome
    }

    fn contribute(&mut self, client: Contact, files: &[(String, u64)]) -> Applied {
        for (name, size) in files {
            if let Some(f) = self.file(name) {
                if f.size_bytes != *size {
                    return Applied::Rejected(format!("size mismatch for {name}"));
                }
            }
        }
        let mut changed = false;
        for (name, size) in files {
            match self.files.iter_mut().find(|f| &f.filename == name) {
                Some(f) => changed |= f.add_holder(client),
                None => {
                    self.files.push(FileEntry {
                        filename: name.clone(),
                        size_bytes: *size,
                        holders: vec![client],
                    });
                    changed = true;
                }
            }
        }
        if changed {
            Self::add_unique(&mut self.contributors, client);
            Applied::Changed
        } else {
            Applied::Unchanged
        }
    }

    /// Union of files, holders, contributors and downloaders; version becomes
    /// one past the larger of the two.
    pub fn merge(&mut self, view: &DatasetMeta) -> Applied {
        if view.hash != self.hash {
            return Applied::Rejected("different dataset".into());
        }
        let mut changed = false;
        for vf in &view.files {
            match self.files.iter_mut().find(|f| f.filename == vf.filename) {
                Some(f) => {
                    if f.size_bytes == vf.size_bytes {
                        for h in &vf.holders {
                            changed |= f.add_holder(*h);
                        }
                    }
                }
                None => {
                    self.files.push(vf.clone());
                    changed = true;
                }
            }
        }
        for c in &view.contributors {
            changed |= Self::add_unique(&mut self.contributors, *c);
        }
        for c in &view.downloaders {
            changed |= Self::add_unique(&mut self.downloaders, *c);
        }
        self.applied.extend(view.applied.iter().copied());
        if view.version > self.version {
            changed = true;
        }
        if changed {
            self.version = self.version.max(view.version) + 1;
            Applied::Changed
        } else {
            Applied::Unchanged
        }
    }
}
