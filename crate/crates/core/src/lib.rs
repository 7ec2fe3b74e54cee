//! Deterministic simulation of a decentralized peer-to-peer training network.
//!
//! Peers find each other through a Kademlia-style DHT, datasets are tracked by
//! Raft-replicated tracker groups, training runs synchronous SGD over a
//! fault-tolerant halving/doubling all-reduce, batch sizes are placed by a
//! REINFORCE policy, and participation is paid in compute-unit coin.

pub mod sim;
pub mod coin;
pub mod dht;
pub mod raft;
pub mod bootstrap;
pub mod multitracker;
pub mod network;
pub mod registry;
pub mod allreduce;
pub mod training;
pub mod placement;
pub mod harness;
