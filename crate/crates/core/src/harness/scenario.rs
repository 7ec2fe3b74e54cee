//! Scenario files: topology, faults, a timed script of dataset operations,
//! training jobs and the assertions that decide whether a run passed.

use super::pool::PoolWeights;
use crate::coin::Rates;
use crate::training::TrainingJobConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario")]
    Parse(#[from] toml::de::Error),
    #[error("scenario is invalid:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Simulated time at which the run ends.
    pub duration_ms: u64,
    pub topology: Topology,
    #[serde(default)]
    pub coin: Rates,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
    #[serde(default, rename = "assert")]
    pub asserts: Vec<Assertion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    #[serde(default = "one")]
    pub bootstrap_servers: usize,
    pub peers: usize,
    #[serde(default = "join_interval")]
    pub join_interval_ms: u64,
    /// Peers that may coordinate training jobs; they never host trackers.
    #[serde(default)]
    pub coordinators: Vec<usize>,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default)]
    pub compute: ComputeSpec,
    /// Per-peer step times overriding the sampled ones.
    #[serde(default)]
    pub step_ms: Vec<PeerStep>,
    /// Tracker replicas per dataset.
    pub tracker_replicas: Option<usize>,
}

fn one() -> usize {
    1
}

fn join_interval() -> u64 {
    20
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatencySpec {
    /// Nodes scattered on a plane; latency grows with distance.
    Planar { min_ms: f64, max_ms: f64, jitter: f64 },
    Uniform { ms: f64 },
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Planar { min_ms: 2.0, max_ms: 20.0, jitter: 0.1 }
    }
}

/// Per-sample training time of each peer, drawn uniformly from a range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComputeSpec {
    pub min_ms: f64,
    pub max_ms: f64,
    /// Bootstrap server's per-sample time, the VCU reference.
    pub reference_ms: f64,
}

impl Default for ComputeSpec {
    fn default() -> Self {
        ComputeSpec { min_ms: 50.0, max_ms: 200.0, reference_ms: 100.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeerStep {
    pub peer: usize,
    pub ms: f64,
}

/// Network-level fault. Peers are named by index, so bootstrap servers
/// cannot be targeted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: FaultKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FaultKind {
    Crash { peer: usize },
    Restart { peer: usize },
    Partition { a: Vec<usize>, b: Vec<usize> },
    Heal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub at_ms: u64,
    #[serde(flatten)]
    pub op: ScriptOp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileSpec {
    pub name: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScriptOp {
    Create { peer: usize, title: String },
    Contribute { peer: usize, title: String, files: Vec<FileSpec> },
    Download { peer: usize, title: String },
    FindNode { peer: usize, target: usize },
    Validate { peer: usize, items: u64 },
    Annotate { peer: usize, items: u64 },
    Penalize { peer: usize, coins: f64 },
    /// Crash whichever peer leads the dataset's tracker group.
    KillTrackerLeader { title: String, restart_after_ms: Option<u64> },
}

impl ScriptOp {
    pub fn peers(&self) -> Vec<usize> {
        match self {
            ScriptOp::Create { peer, .. }
            | ScriptOp::Contribute { peer, .. }
            | ScriptOp::Download { peer, .. }
            | ScriptOp::Validate { peer, .. }
            | ScriptOp::Annotate { peer, .. }
            | ScriptOp::Penalize { peer, .. } => vec![*peer],
            ScriptOp::FindNode { peer, target } => vec![*peer, *target],
            ScriptOp::KillTrackerLeader { .. } => Vec::new(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScriptOp::Create { .. } => "create",
            ScriptOp::Contribute { .. } => "contribute",
            ScriptOp::Download { .. } => "download",
            ScriptOp::FindNode { .. } => "find_node",
            ScriptOp::Validate { .. } => "validate",
            ScriptOp::Annotate { .. } => "annotate",
            ScriptOp::Penalize { .. } => "penalize",
            ScriptOp::KillTrackerLeader { .. } => "kill_tracker_leader",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub name: String,
    /// Registered dataset the job trains on.
    pub dataset: String,
    pub at_ms: u64,
    pub coordinator: usize,
    /// Coin the coordinator spends; buys the same amount of VCU.
    pub budget: f64,
    #[serde(default = "three")]
    pub replicas: usize,
    #[serde(default = "eight")]
    pub max_machines: usize,
    #[serde(default = "default_model")]
    pub model: Vec<usize>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub train: TrainingJobConfig,
    #[serde(default)]
    pub pool: PoolWeights,
    #[serde(default)]
    pub placement: PlacementSpec,
    #[serde(default)]
    pub faults: Vec<JobFault>,
    /// Simulated time the job may take before it counts as stuck.
    #[serde(default = "default_job_deadline")]
    pub deadline_ms: u64,
}

fn three() -> usize {
    3
}

fn eight() -> usize {
    8
}

fn default_model() -> Vec<usize> {
    vec![4, 16, 3]
}

fn default_samples() -> usize {
    256
}

fn default_noise() -> f64 {
    0.05
}

fn default_job_deadline() -> u64 {
    1_800_000
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementSpec {
    pub enabled: bool,
    pub episodes: u64,
    /// Samples one rank can hold; defaults to the global batch.
    pub capacity: Option<usize>,
}

impl Default for PlacementSpec {
    fn default() -> Self {
        PlacementSpec { enabled: false, episodes: 300, capacity: None }
    }
}

/// A fault injected into a training job when some rank leader reaches
/// `exchange` of `step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobFault {
    pub step: u64,
    #[serde(default)]
    pub exchange: usize,
    pub rank: usize,
    #[serde(flatten)]
    pub kind: JobFaultKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobFaultKind {
    KillLeader { restart_after_ms: Option<u64> },
    KillFollower { restart_after_ms: Option<u64> },
    /// Every replica of the rank.
    KillRank,
}

/// A check run after the scenario; any failure fails the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    OpsSucceeded,
    NoSafetyViolations,
    LedgerAudit,
    MinCount { metric: String, count: usize },
    MaxCount { metric: String, count: usize },
    JobCompleted { job: String },
    JobRejected { job: String },
    /// Mean loss over the last quarter of steps is below the first quarter's.
    LossDecreased { job: String },
    /// Weights match a single-machine replay of the committed batches.
    OracleMatch { job: String, tolerance: f64 },
    /// Every sample trained exactly once per epoch.
    ChunkAudit { job: String },
    /// Training rewards were paid for committed contributions only.
    RewardsGated { job: String },
    DatasetAvailable { title: String },
}

impl Assertion {
    fn job(&self) -> Option<&str> {
        match self {
            Assertion::JobCompleted { job }
            | Assertion::JobRejected { job }
            | Assertion::LossDecreased { job }
            | Assertion::OracleMatch { job, .. }
            | Assertion::ChunkAudit { job }
            | Assertion::RewardsGated { job } => Some(job),
            _ => None,
        }
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate().map_err(ScenarioError::Invalid)?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Every problem found, in file order.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let t = &self.topology;
        let peer = |errs: &mut Vec<String>, what: &str, p: usize| {
            if p >= t.peers {
                errs.push(format!("{what}: peer {p} does not exist ({} peers)", t.peers));
            }
        };
        if self.name.trim().is_empty() {
            errs.push("name is empty".into());
        }
        if t.bootstrap_servers == 0 {
            errs.push("topology: need at least one bootstrap server".into());
        }
        if t.peers == 0 {
            errs.push("topology: need at least one peer".into());
        }
        for c in &t.coordinators {
            peer(&mut errs, "topology.coordinators", *c);
        }
        match t.latency {
            LatencySpec::Planar { min_ms, max_ms, jitter } => {
                if !(min_ms >= 0.0 && max_ms >= min_ms && max_ms.is_finite()) {
                    errs.push("topology.latency: need 0 <= min_ms <= max_ms".into());
                }
                if !(0.0..1.0).contains(&jitter) {
                    errs.push("topology.latency: jitter must lie in [0, 1)".into());
                }
            }
            LatencySpec::Uniform { ms } => {
                if !(ms >= 0.0 && ms.is_finite()) {
                    errs.push("topology.latency: ms must be non-negative".into());
                }
            }
        }
        let c = t.compute;
        if !(c.min_ms > 0.0 && c.max_ms >= c.min_ms && c.max_ms.is_finite()) {
            errs.push("topology.compute: need 0 < min_ms <= max_ms".into());
        }
        if !(c.reference_ms > 0.0 && c.reference_ms.is_finite()) {
            errs.push("topology.compute: reference_ms must be positive".into());
        }
        for s in &t.step_ms {
            peer(&mut errs, "topology.step_ms", s.peer);
            if !(s.ms > 0.0 && s.ms.is_finite()) {
                errs.push(format!("topology.step_ms: peer {} has non-positive time", s.peer));
            }
        }
        if t.tracker_replicas == Some(0) {
            errs.push("topology.tracker_replicas must be at least 1".into());
        }

        for (i, f) in self.faults.iter().enumerate() {
            let what = format!("faults[{i}]");
            if f.at_ms > self.duration_ms {
                errs.push(format!("{what}: at_ms is after duration_ms"));
            }
            match &f.action {
                FaultKind::Crash { peer: p } | FaultKind::Restart { peer: p } => peer(&mut errs, &what, *p),
                FaultKind::Partition { a, b } => {
                    for p in a.iter().chain(b) {
                        peer(&mut errs, &what, *p);
                    }
                    if a.iter().any(|p| b.contains(p)) {
                        errs.push(format!("{what}: partition sides overlap"));
                    }
                    if a.is_empty() || b.is_empty() {
                        errs.push(format!("{what}: partition side is empty"));
                    }
                }
                FaultKind::Heal => {}
            }
        }

        // (title, time it is created)
        let mut created: Vec<(&str, u64)> = Vec::new();
        for (i, s) in self.script.iter().enumerate() {
            let what = format!("script[{i}] ({})", s.op.name());
            if s.at_ms > self.duration_ms {
                errs.push(format!("{what}: at_ms is after duration_ms"));
            }
            for p in s.op.peers() {
                peer(&mut errs, &what, p);
            }
            match &s.op {
                ScriptOp::Create { title, .. } => {
                    if created.iter().any(|(t, _)| t == title) {
                        errs.push(format!("{what}: dataset {title:?} is created twice"));
                    }
                    created.push((title, s.at_ms));
                }
                ScriptOp::Contribute { files, .. } if files.is_empty() => {
                    errs.push(format!("{what}: no files"));
                }
                ScriptOp::Penalize { coins, .. } if !(*coins >= 0.0 && coins.is_finite()) => {
                    errs.push(format!("{what}: coins must be non-negative"));
                }
                _ => {}
            }
        }
        let defined = |title: &str, at: u64| created.iter().any(|(t, c)| *t == title && *c <= at);
        for (i, s) in self.script.iter().enumerate() {
            let title = match &s.op {
                ScriptOp::Contribute { title, .. } | ScriptOp::Download { title, .. } | ScriptOp::KillTrackerLeader { title, .. } => {
                    title
                }
                _ => continue,
            };
            if !defined(title, s.at_ms) {
                errs.push(format!("script[{i}] ({}): dataset {title:?} is not created before it is used", s.op.name()));
            }
        }

        let mut names = BTreeSet::new();
        for (i, j) in self.jobs.iter().enumerate() {
            let what = format!("jobs[{i}] ({})", j.name);
            if !names.insert(j.name.as_str()) {
                errs.push(format!("{what}: duplicate job name"));
            }
            if !defined(&j.dataset, j.at_ms) {
                errs.push(format!("{what}: dataset {:?} is not created before the job", j.dataset));
            }
            if j.at_ms > self.duration_ms {
                errs.push(format!("{what}: at_ms is after duration_ms"));
            }
            peer(&mut errs, &what, j.coordinator);
            if !t.coordinators.contains(&j.coordinator) {
                errs.push(format!("{what}: peer {} is not listed in topology.coordinators", j.coordinator));
            }
            if !(j.budget >= 0.0 && j.budget.is_finite()) {
                errs.push(format!("{what}: budget must be non-negative"));
            }
            if j.replicas == 0 {
                errs.push(format!("{what}: replicas must be at least 1"));
            }
            if j.max_machines < j.replicas {
                errs.push(format!("{what}: max_machines is smaller than one rank group"));
            }
            if j.model.len() < 2 || j.model.contains(&0) {
                errs.push(format!("{what}: model needs at least two non-zero layer widths"));
            }
            if j.samples == 0 {
                errs.push(format!("{what}: samples must be at least 1"));
            }
            if let Err(e) = j.train.validate() {
                errs.push(format!("{what}: {e}"));
            }
            if j.pool.validate().is_err() {
                errs.push(format!("{what}: pool weights must be non-negative and finite"));
            }
            if j.placement.enabled && j.placement.episodes == 0 {
                errs.push(format!("{what}: placement needs at least one episode"));
            }
            if j.placement.capacity == Some(0) {
                errs.push(format!("{what}: placement capacity must be at least 1"));
            }
            let max_ranks = j.max_machines / j.replicas.max(1);
            for (k, f) in j.faults.iter().enumerate() {
                if f.rank >= max_ranks {
                    errs.push(format!("{what}: faults[{k}] names rank {} but at most {max_ranks} ranks fit", f.rank));
                }
                if f.step >= j.train.max_steps {
                    errs.push(format!("{what}: faults[{k}] is at step {} of {}", f.step, j.train.max_steps));
                }
            }
        }
        for (i, a) in self.asserts.iter().enumerate() {
            if let Some(job) = a.job() {
                if !names.contains(job) {
                    errs.push(format!("assert[{i}]: unknown job {job:?}"));
                }
            }
            if let Assertion::DatasetAvailable { title } = a {
                if !created.iter().any(|(t, _)| t == title) {
                    errs.push(format!("assert[{i}]: dataset {title:?} is never created"));
                }
            }
            if let Assertion::OracleMatch { tolerance, .. } = a {
                if !(*tolerance >= 0.0) {
                    errs.push(format!("assert[{i}]: tolerance must be non-negative"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
