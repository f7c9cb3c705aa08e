//! Deterministic discrete-event network simulator hosting the replica and
//! client state machines.
//!
//! Virtual time is integer microseconds; timers are events; delivery between
//! a (source, destination) pair preserves send order. Given the same
//! scenario and seed, two runs produce byte-identical traces.

pub mod faults;
pub mod monitor;
pub mod trace;

use crate::actions::{Action, Note, Path, ProtocolConfig, SimTime, TimerKind};
use crate::client::{Client, WorkItem};
use crate::crypto::{keygen, KeyPair, NodeId};
use crate::kv::{CommandId, Reply, Value};
use crate::replica::Replica;
use crate::types::{InstanceId, ProtocolMessage};
use faults::{FaultBehavior, Outbound, Partition, ReplicaHost};
use monitor::Monitor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;
use trace::TraceLog;

/// One-way delays between regions, in microseconds. Every replica is a
/// region; clients map onto a region and are co-located with it (zero
/// delay on the diagonal unless the matrix says otherwise).
#[derive(Debug, Clone)]
pub struct LatencyModel {
    pub delays_us: Vec<Vec<SimTime>>,
    pub client_region: Vec<u32>,
    pub jitter_us: SimTime,
}

impl LatencyModel {
    fn region(&self, node: NodeId) -> u32 {
        match node {
            NodeId::Replica(r) => r,
            NodeId::Client(c) => self.client_region[c as usize],
        }
    }

    pub fn base_delay(&self, from: NodeId, to: NodeId) -> SimTime {
        let a = self.region(from) as usize;
        let b = self.region(to) as usize;
        self.delays_us[a][b]
    }
}

#[derive(Debug, Clone)]
enum EventKind {
    Deliver { src: NodeId, dst: NodeId, msg: ProtocolMessage },
    Timer { node: NodeId, kind: TimerKind },
}

#[derive(Debug, Clone)]
struct Event {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Per-command timing gathered from trace notes.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CommandStat {
    pub client: u32,
    pub t: u64,
    pub submit_us: SimTime,
    pub deliver_us: Option<SimTime>,
    pub path: Option<Path>,
    pub instance: Option<InstanceId>,
}

#[derive(Debug, Default, Clone, serde::Serialize)]
pub struct RunStats {
    pub deliveries_by_kind: BTreeMap<String, u64>,
    pub owner_changes: u64,
    pub rollbacks: u64,
    pub poms: u64,
    pub rehomes: u64,
    pub suspicion_notes: u64,
}

/// Everything a finished run exposes for checking and reporting.
pub struct RunOutcome {
    pub trace: String,
    pub trace_digest: crate::crypto::Digest,
    pub end_time: SimTime,
    pub commands: BTreeMap<CommandId, CommandStat>,
    pub stats: RunStats,
    pub violations: Vec<monitor::Violation>,
    pub correct_replicas: Vec<u32>,
    pub final_kv: BTreeMap<u32, BTreeMap<Vec<u8>, Value>>,
    pub final_orders: BTreeMap<u32, Vec<InstanceId>>,
    pub committed: BTreeMap<u32, BTreeMap<InstanceId, CommittedInfo>>,
    pub submitted: BTreeMap<CommandId, crate::kv::Command>,
    pub delivered_replies: BTreeMap<CommandId, Reply>,
    pub hit_time_limit: bool,
    pub frozen_spaces: BTreeMap<u32, Vec<u32>>,
    /// Owner number of every space, per replica.
    pub space_owners: BTreeMap<u32, Vec<u64>>,
}

/// Commit facts for the end-of-run checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommittedInfo {
    pub cmd: CommandId,
    pub req_digest: crate::crypto::Digest,
    pub deps: crate::types::DepSet,
    pub seq: crate::types::SeqNo,
    pub key: Vec<u8>,
    pub finally_executed: bool,
}

pub struct Simulation {
    cfg: ProtocolConfig,
    latency: LatencyModel,
    replicas: Vec<ReplicaHost>,
    clients: Vec<Client>,
    partitions: Vec<Partition>,
    queue: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
    now: SimTime,
    time_limit: SimTime,
    max_events: u64,
    trace: TraceLog,
    monitor: Monitor,
    net_rng: ChaCha8Rng,
    commands: BTreeMap<CommandId, CommandStat>,
    submitted: BTreeMap<CommandId, crate::kv::Command>,
    stats: RunStats,
}

/// Construction inputs, assembled by the scenario harness.
pub struct SimSetup {
    pub label: String,
    pub cfg: ProtocolConfig,
    pub latency: LatencyModel,
    pub seed: u64,
    pub key_seed: [u8; 32],
    pub client_work: Vec<(u32, Vec<WorkItem>, SimTime)>,
    pub faults: BTreeMap<u32, FaultBehavior>,
    pub partitions: Vec<Partition>,
    pub time_limit: SimTime,
}

impl Simulation {
    pub fn new(setup: SimSetup) -> Self {
        let n = setup.cfg.n;
        let replicas: Vec<ReplicaHost> = (0..n as u32)
            .map(|r| {
                let key = keygen(&setup.key_seed, NodeId::Replica(r));
                let host_key = key.clone();
                let replica = Replica::new(r, setup.cfg.clone(), key);
                ReplicaHost::new(replica, host_key, setup.faults.get(&r).cloned())
            })
            .collect();
        let clients: Vec<Client> = setup
            .client_work
            .iter()
            .enumerate()
            .map(|(i, (home, work, _))| {
                let key = keygen(&setup.key_seed, NodeId::Client(i as u32));
                Client::new(i as u32, setup.cfg.clone(), key, *home, work.clone())
            })
            .collect();

        let mut sim = Simulation {
            cfg: setup.cfg,
            latency: setup.latency,
            replicas,
            clients,
            partitions: setup.partitions,
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            time_limit: setup.time_limit,
            max_events: 5_000_000,
            trace: TraceLog::new(),
            monitor: Monitor::new(),
            net_rng: ChaCha8Rng::seed_from_u64(setup.seed ^ 0x6e65_745f_726e_67),
            commands: BTreeMap::new(),
            submitted: BTreeMap::new(),
            stats: RunStats::default(),
        };
        sim.trace.raw(format!(
            "# ezbft trace v1 scenario={} seed={} n={} f={}",
            setup.label, setup.seed, sim.cfg.n, sim.cfg.f
        ));
        for (i, (_, _, start)) in setup.client_work.iter().enumerate() {
            sim.schedule(*start, EventKind::Timer {
                node: NodeId::Client(i as u32),
                kind: TimerKind::Start,
            });
        }
        sim
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Event { time, seq, kind }));
    }

    fn partitioned(&self, now: SimTime, from: NodeId, to: NodeId) -> bool {
        let rf = self.latency.region(from);
        let rt = self.latency.region(to);
        self.partitions.iter().any(|p| {
            now >= p.from_us
                && now < p.to_us
                && p.group_a.contains(&rf) != p.group_a.contains(&rt)
        })
    }

    /// Route one outbound message through fault filters, partitions, and the
    /// latency model.
    fn send(&mut self, src: NodeId, to: NodeId, msg: ProtocolMessage) {
        let (to, msg, extra) = match src {
            NodeId::Replica(r) => {
                let draw: f64 = self.net_rng.gen();
                match self.replicas[r as usize].filter_outbound(self.now, to, msg, draw) {
                    Outbound::Pass { to, msg } => (to, msg, 0),
                    Outbound::PassDelayed { to, msg, extra_us } => (to, msg, extra_us),
                    Outbound::Suppressed { to, msg, reason } => {
                        self.trace.drop_msg(self.now, src, to, &msg, reason);
                        return;
                    }
                }
            }
            NodeId::Client(_) => (to, msg, 0),
        };
        if self.partitioned(self.now, src, to) {
            self.trace.drop_msg(self.now, src, to, &msg, "partitioned");
            return;
        }
        let base = self.latency.base_delay(src, to);
        let jitter = if self.latency.jitter_us > 0 {
            self.net_rng.gen_range(0..=self.latency.jitter_us)
        } else {
            0
        };
        let at = self.now + base + jitter + extra;
        self.schedule(at, EventKind::Deliver { src, dst: to, msg });
    }

    fn handle_actions(&mut self, node: NodeId, actions: Vec<Action>) {
        // Split outbound sends so byzantine wrappers can rewrite them as a
        // batch (equivocation needs to see the whole broadcast).
        let mut sends: Vec<(NodeId, ProtocolMessage)> = Vec::new();
        let mut rest: Vec<Action> = Vec::new();
        for a in actions {
            match a {
                Action::Send { to, msg } => sends.push((to, msg)),
                other => rest.push(other),
            }
        }
        if let NodeId::Replica(r) = node {
            sends = self.replicas[r as usize].split_spec_orders(sends);
        }
        for (to, msg) in sends {
            self.send(node, to, msg);
        }
        for a in rest {
            match a {
                Action::SetTimer { delay, kind } => {
                    self.schedule(self.now + delay, EventKind::Timer { node, kind });
                }
                Action::Note(note) => self.record_note(node, note),
                Action::Send { .. } => unreachable!(),
            }
        }
    }

    fn record_note(&mut self, node: NodeId, note: Note) {
        // Notes from faulty replicas are traced but never counted as
        // protocol facts.
        let correct = match node {
            NodeId::Replica(r) => self.replicas[r as usize].is_correct(),
            NodeId::Client(_) => true,
        };
        let line = self.trace.note(self.now, &note);
        if !correct {
            return;
        }
        match &note {
            Note::Submitted { client, t } => {
                let id: CommandId = (*client, *t);
                self.commands.insert(
                    id,
                    CommandStat {
                        client: client.index(),
                        t: *t,
                        submit_us: self.now,
                        deliver_us: None,
                        path: None,
                        instance: None,
                    },
                );
            }
            Note::Delivered { client, t, path, instance, .. } => {
                if let Some(stat) = self.commands.get_mut(&(*client, *t)) {
                    stat.deliver_us = Some(self.now);
                    stat.path = Some(*path);
                    stat.instance = Some(*instance);
                }
            }
            Note::NewOwnerApplied { .. } => self.stats.owner_changes += 1,
            Note::Rollback { .. } => self.stats.rollbacks += 1,
            Note::PomEmitted { .. } => self.stats.poms += 1,
            Note::Rehomed { .. } => self.stats.rehomes += 1,
            Note::Suspicion { .. } => self.stats.suspicion_notes += 1,
            _ => {}
        }
        let _ = line;
    }

    fn dispatch(&mut self, ev: Event) {
        match ev.kind {
            EventKind::Deliver { src, dst, msg } => {
                match dst {
                    NodeId::Replica(r) => {
                        if self.replicas[r as usize].crashed_at(self.now) {
                            self.trace.drop_msg(self.now, src, dst, &msg, "crashed");
                            return;
                        }
                        self.trace.deliver(self.now, src, dst, &msg);
                        *self
                            .stats
                            .deliveries_by_kind
                            .entry(msg.kind_str().to_string())
                            .or_default() += 1;
                        // Record submitted commands for nontriviality checks.
                        if let ProtocolMessage::Request(req) = &msg {
                            self.submitted
                                .entry(req.command.id())
                                .or_insert_with(|| req.command.clone());
                        }
                        let consumed = self.replicas[r as usize].intercept_inbound(&msg);
                        let feeds = match consumed {
                            Some(feeds) => feeds,
                            None => vec![msg],
                        };
                        // One batch across all feeds, so wrappers that
                        // rewrite broadcasts see related orders together.
                        let mut actions = Vec::new();
                        for m in feeds {
                            actions.extend(
                                self.replicas[r as usize].replica.on_message(self.now, src, m),
                            );
                        }
                        self.handle_actions(dst, actions);
                    }
                    NodeId::Client(c) => {
                        self.trace.deliver(self.now, src, dst, &msg);
                        *self
                            .stats
                            .deliveries_by_kind
                            .entry(msg.kind_str().to_string())
                            .or_default() += 1;
                        let actions = self.clients[c as usize].on_message(self.now, src, msg);
                        self.handle_actions(dst, actions);
                    }
                }
            }
            EventKind::Timer { node, kind } => {
                match node {
                    NodeId::Replica(r) => {
                        if self.replicas[r as usize].crashed_at(self.now) {
                            return;
                        }
                        self.trace.timer(self.now, node, timer_str(&kind));
                        let actions = self.replicas[r as usize].replica.on_timer(self.now, kind);
                        self.handle_actions(node, actions);
                    }
                    NodeId::Client(c) => {
                        self.trace.timer(self.now, node, timer_str(&kind));
                        let actions = self.clients[c as usize].on_timer(self.now, kind);
                        self.handle_actions(node, actions);
                    }
                }
            }
        }
    }

    /// Run to quiescence or the time limit.
    pub fn run(mut self) -> RunOutcome {
        let mut hit_limit = false;
        let mut events = 0u64;
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.time > self.time_limit {
                hit_limit = true;
                break;
            }
            events += 1;
            if events > self.max_events {
                hit_limit = true;
                break;
            }
            self.now = ev.time;
            self.dispatch(ev);
            let line = self.trace.line_count();
            for host in &self.replicas {
                if host.is_correct() {
                    self.monitor.observe(&host.replica, line);
                }
            }
        }
        self.finish(hit_limit)
    }

    fn finish(self, hit_time_limit: bool) -> RunOutcome {
        let correct: Vec<u32> = self
            .replicas
            .iter()
            .filter(|h| h.is_correct())
            .map(|h| h.replica.id)
            .collect();
        let mut final_kv = BTreeMap::new();
        let mut final_orders = BTreeMap::new();
        let mut committed = BTreeMap::new();
        let mut frozen_spaces: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut space_owners: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for host in &self.replicas {
            let r = &host.replica;
            final_kv.insert(r.id, r.kv().final_map());
            final_orders.insert(r.id, r.final_order().to_vec());
            let recs: BTreeMap<InstanceId, CommittedInfo> = r
                .committed_records()
                .into_iter()
                .map(|(inst, rec)| {
                    (
                        inst,
                        CommittedInfo {
                            cmd: rec.command().id(),
                            req_digest: rec.spec_order.core.req_digest,
                            deps: rec.deps.clone(),
                            seq: rec.seq,
                            key: rec.command().key.clone(),
                            finally_executed: rec.status
                                == crate::types::CommandStatus::FinallyExecuted,
                        },
                    )
                })
                .collect();
            committed.insert(r.id, recs);
            let frozen: Vec<u32> =
                (0..self.cfg.n as u32).filter(|s| r.space_frozen(*s)).collect();
            frozen_spaces.insert(r.id, frozen);
            space_owners
                .insert(r.id, (0..self.cfg.n as u32).map(|s| r.space_owner(s).0).collect());
        }
        let delivered_replies: BTreeMap<CommandId, Reply> = self
            .clients
            .iter()
            .flat_map(|c| {
                let id = c.node_id();
                c.delivered.iter().map(move |(t, rep, _)| ((id, *t), rep.clone()))
            })
            .collect();
        RunOutcome {
            trace_digest: self.trace.digest(),
            trace: self.trace.contents().to_string(),
            end_time: self.now,
            commands: self.commands,
            stats: self.stats,
            violations: self.monitor.violations,
            correct_replicas: correct,
            final_kv,
            final_orders,
            committed,
            submitted: self.submitted,
            delivered_replies,
            hit_time_limit,
            frozen_spaces,
            space_owners,
        }
    }
}

fn timer_str(kind: &TimerKind) -> &'static str {
    match kind {
        TimerKind::Start => "start",
        TimerKind::SlowPath { .. } => "slow-path",
        TimerKind::Retransmit { .. } => "retransmit",
        TimerKind::ResendWait { .. } => "resend-wait",
        TimerKind::BufferedSlot { .. } => "buffered-slot",
    }
}

/// Keys for the whole deployment, shared by every node.
pub fn build_key_table(n: usize, clients: usize, key_seed: &[u8; 32]) -> crate::crypto::KeyTable {
    let mut table = crate::crypto::KeyTable::default();
    for r in 0..n as u32 {
        table.insert(NodeId::Replica(r), keygen(key_seed, NodeId::Replica(r)).public());
    }
    for c in 0..clients as u32 {
        table.insert(NodeId::Client(c), keygen(key_seed, NodeId::Client(c)).public());
    }
    table
}

/// Convenience for tests: a key pair for one node under the given seed.
pub fn node_key(key_seed: &[u8; 32], id: NodeId) -> KeyPair {
    keygen(key_seed, id)
}
