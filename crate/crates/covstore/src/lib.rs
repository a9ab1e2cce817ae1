//! Dynamic, strongly consistent distributed storage for large objects.
//!
//! The stack, bottom up:
//!
//! - [`types`] / [`codec`] / [`wire`] — tags and configurations, `[n, k]`
//!   Reed-Solomon coding, canonical message formats.
//! - [`server`] — the replica state machine: ABD registers, bounded
//!   erasure-coded tag lists, successor-pointer cells and consensus
//!   acceptors.
//! - [`dap`] — configuration-scoped data access primitives (get-tag,
//!   get-data, put-data) in three flavors: full replication, classic erasure
//!   coding, and erasure coding with transfer suppression.
//! - [`reconfig`] / [`coverable`] — configuration-sequence traversal and
//!   migration, and the versioned read/write operations layered on top.
//! - [`frag`] — files as linked lists of coverable blocks: content-defined
//!   chunking, hash diffing, and block-level update/read/reconfig.
//! - [`sim`] / [`scenarios`] — a deterministic discrete-event simulator and
//!   the workload families reproduced on it.
//! - [`checker`] — offline verifiers for the consistency properties every
//!   run is expected to satisfy.
//! - [`net`] — a socket transport carrying the same wire format, for running
//!   the protocols outside the simulator.

pub mod checker;
pub mod codec;
pub mod coverable;
pub mod dap;
pub mod frag;
pub mod history;
pub mod net;
pub mod reconfig;
pub mod scenarios;
pub mod server;
pub mod sim;
pub mod transport;
pub mod types;
pub mod wire;
