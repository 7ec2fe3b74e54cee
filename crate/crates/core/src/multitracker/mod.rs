//! Raft-replicated tracker groups: replica hosting, leader reporting, member
//! repair, creator snapshots and reboot after total loss.

mod creator;
mod replica;

pub use creator::{CreatorSnapshot, CreatorWatch};
pub use replica::TrackerReplica;
