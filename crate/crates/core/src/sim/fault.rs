use super::{NodeId, SimTime};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// A scheduled node- or network-level failure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum FaultAction {
    Crash { node: NodeId },
    Restart { node: NodeId },
    Partition { a: Vec<NodeId>, b: Vec<NodeId> },
    Heal,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FaultScheduleError {
    #[error("fault schedule entries are not sorted by time (entry {0})")]
    Unsorted(usize),
    #[error("partition sides overlap at node {node} (entry {entry})")]
    OverlappingPartition { entry: usize, node: NodeId },
    #[error("node {node} is protected and may not appear in the fault schedule (entry {entry})")]
    ProtectedNode { entry: usize, node: NodeId },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSchedule {
    pub entries: Vec<(SimTime, FaultAction)>,
}

impl FaultSchedule {
    pub fn new(entries: Vec<(SimTime, FaultAction)>) -> Result<Self, FaultScheduleError> {
        let schedule = FaultSchedule { entries };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<(), FaultScheduleError> {
        for (i, pair) in self.entries.windows(2).enumerate() {
            if pair[1].0 < pair[0].0 {
                return Err(FaultScheduleError::Unsorted(i + 1));
            }
        }
        for (i, (_, action)) in self.entries.iter().enumerate() {
            if let FaultAction::Partition { a, b } = action {
                let left: BTreeSet<_> = a.iter().collect();
                if let Some(node) = b.iter().find(|n| left.contains(n)) {
                    return Err(FaultScheduleError::OverlappingPartition { entry: i, node: *node });
                }
            }
        }
        Ok(())
    }

    /// Rejects schedules that touch any of `protected` (bootstrap servers).
    pub fn check_protected(&self, protected: &[NodeId]) -> Result<(), FaultScheduleError> {
        for (i, (_, action)) in self.entries.iter().enumerate() {
            let touched: Vec<NodeId> = match action {
                FaultAction::Crash { node } | FaultAction::Restart { node } => vec![*node],
                FaultAction::Partition { a, b } => a.iter().chain(b.iter()).copied().collect(),
                FaultAction::Heal => Vec::new(),
            };
            if let Some(node) = touched.into_iter().find(|n| protected.contains(n)) {
                return Err(FaultScheduleError::ProtectedNode { entry: i, node });
            }
        }
        Ok(())
    }

    pub fn shifted(&self, offset_ms: u64) -> FaultSchedule {
        FaultSchedule {
            entries: self
                .entries
                .iter()
                .map(|(t, a)| (t.after(offset_ms), a.clone()))
                .collect(),
        }
    }
}
