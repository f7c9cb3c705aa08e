//! Leaderless byzantine fault-tolerant state machine replication, as a
//! deterministic, testable library.
//!
//! Any replica can act as command-leader for the requests it receives from
//! clients; commands commit in three communication steps on the fast path
//! and five on the slow path, with a dependency-graph execution order that
//! is identical at every correct replica. The crate ships the full replica
//! and client state machines, a discrete-event network simulator with fault
//! injection, and a scenario harness with metrics and invariant checking.

pub mod actions;
pub mod cert;
pub mod client;
pub mod crypto;
pub mod exec;
pub mod harness;
pub mod kv;
pub mod owner_change;
pub mod replica;
pub mod sim;
pub mod testkit;
pub mod types;
