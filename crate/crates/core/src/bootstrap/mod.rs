//! Always-available bootstrap servers: id issuance and induction, the
//! replicated dataset index, and the tracker-leader directory.

mod server;
mod state;

pub use server::BootstrapServer;
pub use state::{BootUpdate, BootstrapError, BootstrapState, DatasetRecord, LeaderReport};
