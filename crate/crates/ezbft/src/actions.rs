//! Shared surface between the protocol state machines and whatever hosts
//! them: handler outputs, timer payloads, lifecycle notes, and the static
//! protocol configuration every node holds.

use crate::crypto::{KeyTable, NodeId};
use crate::kv::{CommandId, Reply};
use crate::types::{CertKind, InstanceId, OwnerNumber, ProtocolMessage};
use std::collections::{BTreeMap, BTreeSet};

/// Simulated time in microseconds.
pub type SimTime = u64;

/// Which path delivered a command to the application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Path {
    Fast,
    Slow,
}

impl Path {
    /// Critical-path message steps for the path: request, order, reply on
    /// the fast path, plus commit and commit-reply on the slow path.
    pub fn steps(&self) -> u32 {
        match self {
            Path::Fast => 3,
            Path::Slow => 5,
        }
    }
}

/// Timer payloads. Stale timers are recognized by the embedded state
/// (timestamp, arm counter) and ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerKind {
    /// Client: start issuing the workload.
    Start,
    /// Client: slow-path decision point for request `t`.
    SlowPath { t: u64, arm: u32 },
    /// Client: retransmission deadline for request `t`.
    Retransmit { t: u64, arm: u32 },
    /// Replica: awaiting a SpecOrder from the original recipient.
    ResendWait { cmd: CommandId },
    /// Replica: an out-of-order SpecOrder has waited long enough.
    BufferedSlot { space: u32, slot: u64 },
}

/// Lifecycle events surfaced for tracing, metrics, and the safety monitor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Note {
    Submitted { client: NodeId, t: u64 },
    Delivered { client: NodeId, t: u64, path: Path, rep: Reply, instance: InstanceId },
    SpecExecuted { replica: u32, instance: InstanceId, cmd: CommandId },
    Committed { replica: u32, instance: InstanceId, kind: CertKind, cmd: CommandId },
    FinalExecuted { replica: u32, instance: InstanceId, cmd: CommandId },
    Rollback { replica: u32, undone: u32 },
    PomEmitted { client: NodeId, space: u32, owner: OwnerNumber },
    CommittedToChange { replica: u32, space: u32, owner: OwnerNumber },
    NewOwnerApplied { replica: u32, space: u32, owner: OwnerNumber, safe_len: u32 },
    Rehomed { client: NodeId, home: u32 },
    Dropped { node: NodeId, kind: &'static str, reason: &'static str },
    Suspicion { node: NodeId, about: u32, reason: &'static str },
}

impl Note {
    pub fn kind_str(&self) -> &'static str {
        match self {
            Note::Submitted { .. } => "submit",
            Note::Delivered { .. } => "deliver",
            Note::SpecExecuted { .. } => "spec-exec",
            Note::Committed { .. } => "commit",
            Note::FinalExecuted { .. } => "final-exec",
            Note::Rollback { .. } => "rollback",
            Note::PomEmitted { .. } => "pom",
            Note::CommittedToChange { .. } => "commit-to-change",
            Note::NewOwnerApplied { .. } => "new-owner",
            Note::Rehomed { .. } => "rehome",
            Note::Dropped { .. } => "drop",
            Note::Suspicion { .. } => "suspect",
        }
    }
}

/// One output of a handler invocation.
#[derive(Debug, Clone)]
pub enum Action {
    Send { to: NodeId, msg: ProtocolMessage },
    SetTimer { delay: SimTime, kind: TimerKind },
    Note(Note),
}

impl Action {
    pub fn send(to: NodeId, msg: ProtocolMessage) -> Self {
        Action::Send { to, msg }
    }
}

/// Static configuration shared by every node in a deployment.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub n: usize,
    pub f: usize,
    pub keys: KeyTable,
    /// Designated slow-path quorum per command-leader, always 2f+1 members.
    pub slow_quorums: BTreeMap<u32, BTreeSet<u32>>,
    pub slow_timer_us: SimTime,
    pub retransmit_timer_us: SimTime,
    pub resend_wait_us: SimTime,
    pub buffer_timeout_us: SimTime,
    pub buffer_cap: usize,
    pub checkpoint_interval: u64,
    /// OwnerChange messages the new owner waits for before announcing.
    pub owner_change_quorum: usize,
    /// Retransmission cycles before a client picks the next home replica.
    pub rehome_after: u32,
    /// Exponent cap for retransmission backoff.
    pub backoff_cap: u32,
    /// Partial (key-scoped) speculative rollback; full rollback otherwise.
    pub partial_rollback: bool,
}

impl ProtocolConfig {
    pub fn fast_quorum(&self) -> usize {
        3 * self.f + 1
    }

    pub fn slow_quorum_size(&self) -> usize {
        2 * self.f + 1
    }

    pub fn quorum_of(&self, leader: u32) -> &BTreeSet<u32> {
        &self.slow_quorums[&leader]
    }

    /// Default quorum table: the 2f+1 lowest-indexed replicas, for every
    /// leader.
    pub fn default_quorums(n: usize, f: usize) -> BTreeMap<u32, BTreeSet<u32>> {
        let q: BTreeSet<u32> = (0..(2 * f + 1) as u32).collect();
        (0..n as u32).map(|r| (r, q.clone())).collect()
    }
}
