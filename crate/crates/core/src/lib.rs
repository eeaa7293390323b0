//! A mobile-agent mesh.
//!
//! Stateful agents migrate between station daemons with a two-phase commit,
//! stations and service agents are discovered through a leased lookup
//! registry, and agent code is referenced by signed, content-addressed
//! bundles that every station verifies against its trust store before
//! admitting an arriving agent.
//!
//! The crate is organized around the moving parts:
//!
//! - [`wire`]: ids, snapshots, canonical JSON, frame codec
//! - [`security`]: keys, certificates, bundle signing, admission, handshake
//! - [`lookup`]: the leased registry (server and client)
//! - [`codeserver`]: bundle store and HTTP fetch
//! - [`migration`]: move transactions and their write-ahead log
//! - [`station`]: the agent runtime daemon
//! - [`agents`]: the behavior interface and the built-in behaviors
//! - [`client`]: starter, attach sessions, CLI and console gateway
//! - [`bench`]: mobility soak and transfer throughput harness
//! - [`localmesh`]: in-process mesh wiring used by examples, tests and bench
//!
//! Runnable walkthroughs live in `examples/`.

pub mod agents;
pub mod bench;
pub mod client;
pub mod clock;
pub mod codeserver;
pub mod localmesh;
pub mod lookup;
pub mod migration;
pub mod security;
pub mod station;
pub mod wire;
