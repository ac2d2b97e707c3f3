//! A distributed, versioned, RAM-backed blob store.
//!
//! Massive logical blocks are fragmented into fixed-size pages spread
//! across data providers. Each block version is described by an
//! immutable full-binary metadata tree whose nodes live in a
//! partitioned key-value ring, so disjoint reads and writes proceed
//! with almost no shared state and every published version stays
//! readable forever as a snapshot.
//!
//! The moving parts:
//!
//! * [`block`] and [`tree`] — pure geometry, key derivation and the
//!   per-version tree algorithms.
//! * [`ring`] — the metadata key-value ring (gateway service + client).
//! * [`provider`] — page storage nodes.
//! * [`manager`] — the registry of data providers.
//! * [`versioning`] — version assignment and the per-block FIFO write
//!   queue.
//! * [`client`] — the user-facing alloc/write/read library.
//! * [`transport`] — the RPC substrate (in-process and TCP backends).
//! * [`deploy`] and [`bench`] — local constellations and the benchmark
//!   harness behind the CLI.

pub mod bench;
pub mod block;
pub mod client;
pub mod deploy;
pub mod manager;
pub mod oracle;
pub mod provider;
pub mod ring;
pub mod sync;
pub mod transport;
pub mod tree;
pub mod versioning;
pub mod wire;

pub use block::{BlockDescriptor, BlockId, ByteRange, NodeKey, PageId, Version, NULL_KEY};
pub use client::{Client, ClientConfig, ClientError};
pub use transport::{Endpoint, InprocTransport, TcpTransport, Transport};
