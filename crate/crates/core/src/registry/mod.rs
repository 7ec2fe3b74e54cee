//! Dataset metadata and the client operations that create, extend and fetch
//! datasets.

mod client;
mod meta;

pub use client::{DownloadReport, OpReport};
pub(crate) use client::{Op, PlaceOp};
pub use meta::{
    chunk_payload, chunk_ranges, dataset_hash, Applied, DatasetMeta, FileChunk, FileEntry, TrackerCommand, CHUNK_SIZE,
};
