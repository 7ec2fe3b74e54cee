//! XOR-metric peer discovery: 256-bit ids, bucketed routing tables and the
//! iterative find-node protocol.

mod id;
mod node;
mod table;

pub use id::{xor_distance, Distance, PeerId, ID_BITS};
pub use node::{DhtConfig, DhtMsg, DhtNode, DhtTimer, LookupOutcome, LookupResult, DEFAULT_FAN_OUT};
pub use table::{
    bucket_index, Contact, DhtError, InsertAttempt, InsertOutcome, RoutingTable,
    DEFAULT_BUCKET_CAPACITY,
};
