//! The replica-side protocol state machine.
//!
//! A replica orders the requests it receives from clients in its own
//! instance space, validates and speculatively executes orders proposed by
//! other command-leaders, handles fast and slow commits, answers
//! retransmitted requests, and participates in ownership changes for
//! suspected spaces.

use crate::actions::{Action, Note, ProtocolConfig, SimTime, TimerKind};
use crate::cert;
use crate::crypto::{digest, sign, Digest, KeyPair, NodeId};
use crate::exec;
use crate::kv::{interferes, ApplyMode, Command, CommandId, KvState, Reply};
use crate::owner_change::{entry_metadata, select_history};
use crate::types::{
    self, CertKind, CommandStatus, CommitEvidence, CommitFastMsg, CommitMsg, CommitReplyMsg,
    DepSet, InstanceId, NewOwnerMsg, OwnerChangeEntry, OwnerChangeMsg, OwnerNumber, PomMsg,
    ProtocolMessage, RequestMsg, ResendReqMsg, SeqNo, SpecOrderCore, SpecOrderMsg, SpecReplyCore,
    SpecReplyMsg, StartOwnerChangeMsg,
};
use std::collections::{BTreeMap, BTreeSet};

/// Per-instance protocol state.
#[derive(Debug, Clone)]
pub struct CommandRecord {
    pub instance: InstanceId,
    pub spec_order: SpecOrderMsg,
    pub deps: DepSet,
    pub seq: SeqNo,
    pub status: CommandStatus,
    pub spec_rep: Option<Reply>,
    pub final_rep: Option<Reply>,
    pub sent_reply: Option<SpecReplyMsg>,
    pub evidence: Option<CommitEvidence>,
}

impl CommandRecord {
    pub fn command(&self) -> &Command {
        &self.spec_order.request.command
    }

    fn committed_slow_like(&self) -> bool {
        matches!(self.evidence, Some(CommitEvidence::Slow(_))) || self.evidence.is_none()
    }
}

/// A commit that arrived before its order; applied once the order lands.
#[derive(Debug, Clone)]
struct PendingCommit {
    kind: CertKind,
    deps: DepSet,
    seq: SeqNo,
    evidence: CommitEvidence,
}

/// One instance space as this replica sees it.
#[derive(Debug, Default)]
struct Space {
    owner: OwnerNumber,
    frozen: bool,
    committed_to_change: bool,
    next_slot: u64,
    checkpoint: u64,
    chain: Digest,
    records: BTreeMap<u64, CommandRecord>,
    buffered: BTreeMap<u64, SpecOrderMsg>,
    pending_commits: BTreeMap<u64, PendingCommit>,
    change_votes: BTreeMap<u64, BTreeSet<u32>>,
    collected: BTreeMap<u64, BTreeMap<u32, OwnerChangeMsg>>,
    announced: BTreeSet<u64>,
}

/// Starting value of a space's order-digest chain.
pub fn space_genesis(space: u32) -> Digest {
    let mut payload = b"ezbft.space.v1".to_vec();
    payload.extend_from_slice(&space.to_be_bytes());
    digest(&payload)
}

#[derive(Debug, Default, Clone, serde::Serialize)]
pub struct ReplicaCounters {
    pub dropped: u64,
    pub suspicions: u64,
    pub rollbacks: u64,
    pub buffered_overflow: u64,
}

pub struct Replica {
    pub id: u32,
    cfg: ProtocolConfig,
    key: KeyPair,
    spaces: BTreeMap<u32, Space>,
    kv: KvState,
    /// Interference candidates: instances recorded per key.
    key_index: BTreeMap<Vec<u8>, BTreeSet<InstanceId>>,
    /// Every instance each (client, t) was seen ordered at. Re-homed
    /// retransmissions can legitimately order one command in several spaces.
    seen: BTreeMap<CommandId, BTreeSet<InstanceId>>,
    /// Highest timestamp this replica ordered per client, as leader.
    led_t: BTreeMap<NodeId, u64>,
    /// Speculative results per command, for exactly-once semantics.
    spec_reps: BTreeMap<CommandId, (InstanceId, Reply)>,
    /// Final results per command; duplicates re-use these without touching
    /// state.
    final_reps: BTreeMap<CommandId, Reply>,
    spec_done: BTreeSet<InstanceId>,
    final_done: BTreeSet<InstanceId>,
    final_order: Vec<InstanceId>,
    resend_waits: BTreeMap<CommandId, u32>,
    pub counters: ReplicaCounters,
}

impl Replica {
    pub fn new(id: u32, cfg: ProtocolConfig, key: KeyPair) -> Self {
        let spaces = (0..cfg.n as u32)
            .map(|s| {
                let sp = Space {
                    owner: OwnerNumber(s as u64),
                    chain: space_genesis(s),
                    ..Space::default()
                };
                (s, sp)
            })
            .collect();
        Replica {
            id,
            cfg,
            key,
            spaces,
            kv: KvState::new(),
            key_index: BTreeMap::new(),
            seen: BTreeMap::new(),
            led_t: BTreeMap::new(),
            spec_reps: BTreeMap::new(),
            final_reps: BTreeMap::new(),
            spec_done: BTreeSet::new(),
            final_done: BTreeSet::new(),
            final_order: Vec::new(),
            resend_waits: BTreeMap::new(),
            counters: ReplicaCounters::default(),
        }
    }

    pub fn node_id(&self) -> NodeId {
        NodeId::Replica(self.id)
    }

    pub fn kv(&self) -> &KvState {
        &self.kv
    }

    pub fn final_order(&self) -> &[InstanceId] {
        &self.final_order
    }

    pub fn record(&self, instance: InstanceId) -> Option<&CommandRecord> {
        self.spaces.get(&instance.space)?.records.get(&instance.slot)
    }

    /// All records with a committed status, for end-of-run checking.
    pub fn committed_records(&self) -> BTreeMap<InstanceId, &CommandRecord> {
        self.spaces
            .values()
            .flat_map(|s| s.records.values())
            .filter(|r| r.status.is_committed())
            .map(|r| (r.instance, r))
            .collect()
    }

    pub fn space_owner(&self, space: u32) -> OwnerNumber {
        self.spaces[&space].owner
    }

    pub fn space_frozen(&self, space: u32) -> bool {
        self.spaces[&space].frozen
    }

    pub fn space_len(&self, space: u32) -> u64 {
        self.spaces[&space].next_slot
    }

    pub fn space_checkpoint(&self, space: u32) -> u64 {
        self.spaces[&space].checkpoint
    }

    // -- dispatch ----------------------------------------------------------

    pub fn on_message(&mut self, _now: SimTime, src: NodeId, msg: ProtocolMessage) -> Vec<Action> {
        match msg {
            ProtocolMessage::Request(m) => match m.original_recipient {
                None => self.on_request(m),
                Some(_) => self.on_retransmitted_request(m),
            },
            ProtocolMessage::SpecOrder(m) => self.on_spec_order(m),
            ProtocolMessage::CommitFast(m) => self.on_commit_fast(m),
            ProtocolMessage::Commit(m) => self.on_commit(m),
            ProtocolMessage::ResendReq(m) => self.on_resend_req(m),
            ProtocolMessage::Pom(m) => self.on_pom(src, m),
            ProtocolMessage::StartOwnerChange(m) => self.on_start_owner_change(src, m),
            ProtocolMessage::OwnerChange(m) => self.on_owner_change(m),
            ProtocolMessage::NewOwner(m) => self.on_new_owner(m),
            ProtocolMessage::SpecReply(_) | ProtocolMessage::CommitReply(_) => {
                self.drop_msg("misdirected", "replica got a client message")
            }
        }
    }

    pub fn on_timer(&mut self, _now: SimTime, kind: TimerKind) -> Vec<Action> {
        match kind {
            TimerKind::ResendWait { cmd } => self.on_resend_deadline(cmd),
            TimerKind::BufferedSlot { space, slot } => self.on_buffer_deadline(space, slot),
            _ => Vec::new(),
        }
    }

    fn drop_msg(&mut self, kind: &'static str, reason: &'static str) -> Vec<Action> {
        self.counters.dropped += 1;
        vec![Action::Note(Note::Dropped { node: NodeId::Replica(self.id), kind, reason })]
    }

    fn suspect(&mut self, about: u32, reason: &'static str) -> Action {
        self.counters.suspicions += 1;
        Action::Note(Note::Suspicion { node: NodeId::Replica(self.id), about, reason })
    }

    fn broadcast_replicas(&self, msg: &ProtocolMessage, out: &mut Vec<Action>) {
        for r in 0..self.cfg.n as u32 {
            if r != self.id {
                out.push(Action::send(NodeId::Replica(r), msg.clone()));
            }
        }
    }

    // -- request handling (command-leader path) -----------------------------

    fn on_request(&mut self, m: RequestMsg) -> Vec<Action> {
        if !cert::verify_request(&self.cfg.keys, &m) {
            return self.drop_msg("Request", "bad client signature");
        }
        let client = m.client();
        let t = m.t();
        let seen_t = self.led_t.get(&client).copied().unwrap_or(0);
        if t < seen_t {
            return self.drop_msg("Request", "stale timestamp");
        }
        if t == seen_t {
            return self.resend_cached(client, t, Some(self.id));
        }
        let my_space = &self.spaces[&self.id];
        if my_space.frozen || my_space.committed_to_change {
            return self.drop_msg("Request", "own space not accepting proposals");
        }
        self.order_request(m)
    }

    /// Order a fresh request in this replica's own space and relay it.
    fn order_request(&mut self, m: RequestMsg) -> Vec<Action> {
        let client = m.client();
        let t = m.t();
        let cmd = m.command.clone();
        let deps = self.collect_deps(&cmd, None);
        let seq = SeqNo(1 + deps.iter().filter_map(|d| self.record(*d)).map(|r| r.seq.0).max().unwrap_or(0));
        let space = self.spaces.get_mut(&self.id).expect("own space");
        // Proposals always go to this replica's own space, whatever other
        // spaces it may have come to own.
        let instance = InstanceId::new(self.id, space.next_slot);
        let core = SpecOrderCore {
            owner: space.owner,
            instance,
            deps: deps.clone(),
            seq,
            space_digest: space.chain,
            req_digest: types::request_digest(&m),
        };
        let sig = sign(&self.key, &types::so_signing_bytes(&core));
        let so = SpecOrderMsg { core, sig, request: m };

        self.led_t.insert(client, t);
        self.accept_record(so.clone());
        let mut out = Vec::new();
        self.run_speculative(&mut out);
        let reply = self.build_spec_reply(instance);
        if let Some(r) = &reply {
            self.spaces.get_mut(&self.id).unwrap().records.get_mut(&instance.slot).unwrap().sent_reply =
                Some(r.clone());
            out.push(Action::send(client, ProtocolMessage::SpecReply(r.clone())));
        }
        self.broadcast_replicas(&ProtocolMessage::SpecOrder(so), &mut out);
        self.apply_pending_commit(instance, &mut out);
        out
    }

    /// Dependencies: every recorded interfering command, excluding `skip`.
    fn collect_deps(&self, cmd: &Command, skip: Option<InstanceId>) -> DepSet {
        let mut deps = DepSet::new();
        if let Some(insts) = self.key_index.get(&cmd.key) {
            for inst in insts {
                if Some(*inst) == skip {
                    continue;
                }
                if let Some(rec) = self.record(*inst) {
                    if interferes(cmd, rec.command()) {
                        deps.insert(*inst);
                    }
                }
            }
        }
        deps
    }

    fn resend_cached(&mut self, client: NodeId, t: u64, prefer_space: Option<u32>) -> Vec<Action> {
        let mut out = Vec::new();
        let instance = prefer_space
            .and_then(|sp| self.seen_in(&(client, t), sp))
            .or_else(|| prefer_space.is_none().then(|| self.seen_any(&(client, t))).flatten());
        if let Some(instance) = instance {
            if let Some(rec) = self.record(instance) {
                if let Some(r) = &rec.sent_reply {
                    out.push(Action::send(client, ProtocolMessage::SpecReply(r.clone())));
                }
                if rec.status == CommandStatus::FinallyExecuted && rec.committed_slow_like() {
                    if let Some(rep) = &rec.final_rep {
                        out.push(Action::send(
                            client,
                            ProtocolMessage::CommitReply(CommitReplyMsg {
                                client,
                                t,
                                instance,
                                rep: rep.clone(),
                                sender: self.id,
                            }),
                        ));
                    }
                }
            }
        }
        if out.is_empty() {
            return self.drop_msg("Request", "duplicate with nothing cached");
        }
        out
    }

    // -- speculative ordering validation ------------------------------------

    fn on_spec_order(&mut self, m: SpecOrderMsg) -> Vec<Action> {
        let space_idx = m.core.instance.space;
        if space_idx as usize >= self.cfg.n || space_idx == self.id {
            return self.drop_msg("SpecOrder", "bad space");
        }
        {
            let space = &self.spaces[&space_idx];
            if space.frozen || space.committed_to_change {
                return self.drop_msg("SpecOrder", "space frozen or changing");
            }
            if m.core.owner != space.owner {
                return self.drop_msg("SpecOrder", "stale owner number");
            }
        }
        if !cert::verify_spec_order(&self.cfg.keys, self.cfg.n, &m) {
            return self.drop_msg("SpecOrder", "bad signatures");
        }

        let slot = m.core.instance.slot;
        let next = self.spaces[&space_idx].next_slot;
        if slot < next {
            return self.drop_msg("SpecOrder", "duplicate slot");
        }
        if slot > next {
            return self.buffer_spec_order(space_idx, m);
        }
        let mut out = Vec::new();
        self.admit_spec_order(m, &mut out);
        self.drain_buffered(space_idx, &mut out);
        out
    }

    fn buffer_spec_order(&mut self, space_idx: u32, m: SpecOrderMsg) -> Vec<Action> {
        let cap = self.cfg.buffer_cap;
        let timeout = self.cfg.buffer_timeout_us;
        let space = self.spaces.get_mut(&space_idx).expect("space");
        if space.buffered.len() >= cap {
            self.counters.buffered_overflow += 1;
            let mut out = self.drop_msg("SpecOrder", "buffer overflow");
            out.push(self.suspect(space_idx, "buffer overflow"));
            return out;
        }
        let slot = m.core.instance.slot;
        space.buffered.entry(slot).or_insert(m);
        vec![Action::SetTimer { delay: timeout, kind: TimerKind::BufferedSlot { space: space_idx, slot } }]
    }

    fn drain_buffered(&mut self, space_idx: u32, out: &mut Vec<Action>) {
        loop {
            let next = self.spaces[&space_idx].next_slot;
            let Some(m) = self.spaces.get_mut(&space_idx).unwrap().buffered.remove(&next) else {
                break;
            };
            self.admit_spec_order(m, out);
        }
    }

    /// Validate the digest chain, update metadata, record, speculatively
    /// execute, and reply to the client.
    fn admit_spec_order(&mut self, m: SpecOrderMsg, out: &mut Vec<Action>) {
        let space_idx = m.core.instance.space;
        let instance = m.core.instance;
        if m.core.space_digest != self.spaces[&space_idx].chain {
            self.counters.dropped += 1;
            out.push(Action::Note(Note::Dropped {
                node: NodeId::Replica(self.id),
                kind: "SpecOrder",
                reason: "space digest mismatch",
            }));
            out.push(self.suspect(space_idx, "space digest mismatch"));
            return;
        }

        let cmd = m.request.command.clone();
        let mut deps = self.collect_deps(&cmd, Some(instance));
        deps.extend(m.core.deps.iter().copied());
        let seq = if deps == m.core.deps {
            m.core.seq
        } else {
            let local_max =
                deps.iter().filter_map(|d| self.record(*d)).map(|r| r.seq.0).max().unwrap_or(0);
            SeqNo(m.core.seq.0.max(1 + local_max))
        };

        // The original signed core travels in replies; local updates live in
        // the record and the reply core.
        self.accept_record_with(m.clone(), deps, seq);
        self.run_speculative(out);

        if let Some(reply) = self.build_spec_reply(instance) {
            self.spaces
                .get_mut(&space_idx)
                .unwrap()
                .records
                .get_mut(&instance.slot)
                .unwrap()
                .sent_reply = Some(reply.clone());
            out.push(Action::send(m.request.client(), ProtocolMessage::SpecReply(reply)));
        }
        self.apply_pending_commit(instance, out);
    }

    /// Record an order exactly as proposed (leader path).
    fn accept_record(&mut self, so: SpecOrderMsg) {
        let deps = so.core.deps.clone();
        let seq = so.core.seq;
        self.accept_record_with(so, deps, seq);
    }

    fn accept_record_with(&mut self, so: SpecOrderMsg, deps: DepSet, seq: SeqNo) {
        let instance = so.core.instance;
        let cmd_id = so.request.command.id();
        let key = so.request.command.key.clone();
        let encoded = types::encode(&ProtocolMessage::SpecOrder(so.clone()));
        let record = CommandRecord {
            instance,
            spec_order: so,
            deps,
            seq,
            status: CommandStatus::PreAccepted,
            spec_rep: None,
            final_rep: None,
            sent_reply: None,
            evidence: None,
        };
        let space = self.spaces.get_mut(&instance.space).expect("space");
        debug_assert_eq!(space.next_slot, instance.slot);
        space.records.insert(instance.slot, record);
        space.next_slot = instance.slot + 1;
        space.chain = crate::crypto::digest_parts(&[&space.chain.0, &encoded]);
        self.key_index.entry(key).or_default().insert(instance);
        self.seen.entry(cmd_id).or_default().insert(instance);
        self.resend_waits.remove(&cmd_id);
    }

    fn seen_in(&self, cmd: &CommandId, space: u32) -> Option<InstanceId> {
        self.seen.get(cmd)?.iter().find(|i| i.space == space).copied()
    }

    fn seen_any(&self, cmd: &CommandId) -> Option<InstanceId> {
        self.seen.get(cmd)?.iter().next().copied()
    }

    fn build_spec_reply(&mut self, instance: InstanceId) -> Option<SpecReplyMsg> {
        let rec = self.record(instance)?;
        let rep = rec.spec_rep.clone()?;
        let core = SpecReplyCore {
            owner: rec.spec_order.core.owner,
            instance,
            deps: rec.deps.clone(),
            seq: rec.seq,
            req_digest: rec.spec_order.core.req_digest,
            client: rec.command().client,
            t: rec.command().t,
        };
        let sig = sign(&self.key, &types::sr_signing_bytes(&core));
        Some(SpecReplyMsg {
            core,
            sig,
            sender: self.id,
            rep,
            so_core: rec.spec_order.core.clone(),
            so_sig: rec.spec_order.sig,
        })
    }

    // -- execution ----------------------------------------------------------

    /// Speculatively execute every pre-accepted record whose locally known
    /// dependencies allow it, in linearization order.
    fn run_speculative(&mut self, out: &mut Vec<Action>) {
        let view: BTreeMap<InstanceId, exec::ExecNode> = self
            .spaces
            .values()
            .flat_map(|s| s.records.values())
            .filter(|r| r.status == CommandStatus::PreAccepted)
            .map(|r| {
                (r.instance, exec::ExecNode { seq: r.seq, deps: r.deps.clone(), committed: false })
            })
            .collect();
        if view.is_empty() {
            return;
        }
        for instance in exec::linearize(&view) {
            self.spec_execute_one(instance, out);
        }
    }

    fn spec_execute_one(&mut self, instance: InstanceId, out: &mut Vec<Action>) {
        let rec = self.record(instance).expect("record");
        let cmd = rec.command().clone();
        let rep = if let Some(rep) = self.final_reps.get(&cmd.id()) {
            rep.clone()
        } else if let Some((_, rep)) = self.spec_reps.get(&cmd.id()) {
            rep.clone()
        } else {
            let rep = self.kv.apply(instance, &cmd, ApplyMode::Speculative);
            self.spec_reps.insert(cmd.id(), (instance, rep.clone()));
            rep
        };
        let rec = self
            .spaces
            .get_mut(&instance.space)
            .unwrap()
            .records
            .get_mut(&instance.slot)
            .unwrap();
        rec.spec_rep = Some(rep);
        rec.status = CommandStatus::SpecExecuted;
        self.spec_done.insert(instance);
        out.push(Action::Note(Note::SpecExecuted { replica: self.id, instance, cmd: cmd.id() }));
    }

    /// Finally execute every committed record whose transitive dependencies
    /// are committed, in linearization order.
    ///
    /// A dependency on an instance that never commits would block forever;
    /// when the same command is committed at another instance (a re-homed
    /// duplicate), execution is exactly-once, so the edge is redirected to
    /// the committed twin, which carries the ordering intent.
    fn run_final(&mut self, out: &mut Vec<Action>) {
        let committed_twins: BTreeMap<CommandId, Vec<InstanceId>> = {
            let mut m: BTreeMap<CommandId, Vec<InstanceId>> = BTreeMap::new();
            for r in self.spaces.values().flat_map(|s| s.records.values()) {
                if r.status.is_committed() {
                    m.entry(r.command().id()).or_default().push(r.instance);
                }
            }
            m
        };
        let redirect = |rec: &CommandRecord| -> DepSet {
            let mut deps = DepSet::new();
            for d in &rec.deps {
                match self.record(*d) {
                    Some(drec) if !drec.status.is_committed() => {
                        let id = drec.command().id();
                        match committed_twins.get(&id) {
                            Some(twins) => deps.extend(twins.iter().copied()),
                            None => {
                                deps.insert(*d);
                            }
                        }
                    }
                    _ => {
                        deps.insert(*d);
                    }
                }
            }
            deps.remove(&rec.instance);
            deps
        };
        let full: BTreeMap<InstanceId, exec::ExecNode> = self
            .spaces
            .values()
            .flat_map(|s| s.records.values())
            .map(|r| {
                let committed = r.status.is_committed();
                let deps = if committed { redirect(r) } else { r.deps.clone() };
                (r.instance, exec::ExecNode { seq: r.seq, deps, committed })
            })
            .collect();
        let committed: BTreeMap<InstanceId, exec::ExecNode> = full
            .iter()
            .filter(|(_, n)| n.committed)
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        for instance in exec::linearize(&committed) {
            if self.final_done.contains(&instance) {
                continue;
            }
            if !exec::ready_for_final(&full, instance) {
                continue;
            }
            self.final_execute_one(instance, out);
        }
        self.advance_checkpoints();
    }

    fn final_execute_one(&mut self, instance: InstanceId, out: &mut Vec<Action>) {
        let rec = self.record(instance).expect("record");
        let cmd = rec.command().clone();
        let slow = rec.committed_slow_like();

        // Invalidate speculative results that touched this key, then apply on
        // the final chain and replay the surviving speculation.
        let undone = if self.cfg.partial_rollback {
            let keys: BTreeSet<Vec<u8>> = [cmd.key.clone()].into_iter().collect();
            self.kv.rollback_touching(&keys)
        } else {
            self.kv.rollback_all()
        };
        let survivors: Vec<InstanceId> =
            undone.into_iter().filter(|i| *i != instance && !self.final_done.contains(i)).collect();

        let rep = if let Some(rep) = self.final_reps.get(&cmd.id()) {
            rep.clone()
        } else {
            let rep = self.kv.apply(instance, &cmd, ApplyMode::Final);
            self.final_reps.insert(cmd.id(), rep.clone());
            rep
        };

        // Survivors whose order is already committed stay rolled back and
        // re-execute on the final chain: their speculation was invalidated.
        // The rest replay speculatively, unchanged.
        let mut invalidated = 0u32;
        for s in survivors {
            let Some(srec) = self.record(s) else { continue };
            if srec.status.is_committed() && !self.final_done.contains(&s) {
                invalidated += 1;
                continue;
            }
            let scmd = srec.command().clone();
            let srep = self.kv.apply(s, &scmd, ApplyMode::Speculative);
            self.spec_reps.insert(scmd.id(), (s, srep.clone()));
            if let Some(r) =
                self.spaces.get_mut(&s.space).and_then(|sp| sp.records.get_mut(&s.slot))
            {
                r.spec_rep = Some(srep);
            }
        }
        if invalidated > 0 {
            self.counters.rollbacks += invalidated as u64;
            out.push(Action::Note(Note::Rollback { replica: self.id, undone: invalidated }));
        }

        let rec = self
            .spaces
            .get_mut(&instance.space)
            .unwrap()
            .records
            .get_mut(&instance.slot)
            .unwrap();
        rec.final_rep = Some(rep.clone());
        rec.status = CommandStatus::FinallyExecuted;
        self.final_done.insert(instance);
        self.final_order.push(instance);
        out.push(Action::Note(Note::FinalExecuted { replica: self.id, instance, cmd: cmd.id() }));

        if slow {
            out.push(Action::send(
                cmd.client,
                ProtocolMessage::CommitReply(CommitReplyMsg {
                    client: cmd.client,
                    t: cmd.t,
                    instance,
                    rep,
                    sender: self.id,
                }),
            ));
        }
    }

    fn advance_checkpoints(&mut self) {
        let k = self.cfg.checkpoint_interval;
        if k == 0 {
            return;
        }
        for space in self.spaces.values_mut() {
            loop {
                let end = space.checkpoint + k;
                if end > space.next_slot {
                    break;
                }
                let all_final = (space.checkpoint..end).all(|s| {
                    space
                        .records
                        .get(&s)
                        .map(|r| r.status == CommandStatus::FinallyExecuted)
                        .unwrap_or(false)
                });
                if !all_final {
                    break;
                }
                space.checkpoint = end;
            }
        }
    }

    // -- commits -------------------------------------------------------------

    fn on_commit_fast(&mut self, m: CommitFastMsg) -> Vec<Action> {
        let Some((deps, seq)) = cert::verify_fast_cert(&self.cfg.keys, self.cfg.n, &m.cert, m.instance)
        else {
            return self.drop_msg("CommitFast", "invalid certificate");
        };
        let evidence = CommitEvidence::Fast(m.cert.clone());
        self.commit_instance(m.instance, CertKind::Fast, deps, seq, evidence)
    }

    fn on_commit(&mut self, m: CommitMsg) -> Vec<Action> {
        let leader = m
            .cert
            .replies
            .first()
            .map(|r| r.core.owner.owner_index(self.cfg.n))
            .unwrap_or(m.instance.space);
        let Some(quorum) = self.cfg.slow_quorums.get(&leader).cloned() else {
            return self.drop_msg("Commit", "unknown quorum");
        };
        if !cert::verify_commit(&self.cfg.keys, self.cfg.n, self.cfg.f, &quorum, &m) {
            return self.drop_msg("Commit", "invalid commit");
        }
        let evidence = CommitEvidence::Slow(m.clone());
        self.commit_instance(m.instance, CertKind::Slow, m.deps.clone(), m.seq, evidence)
    }

    fn commit_instance(
        &mut self,
        instance: InstanceId,
        kind: CertKind,
        deps: DepSet,
        seq: SeqNo,
        evidence: CommitEvidence,
    ) -> Vec<Action> {
        let Some(space) = self.spaces.get_mut(&instance.space) else {
            return self.drop_msg("Commit", "bad space");
        };
        let mut out = Vec::new();
        match space.records.get_mut(&instance.slot) {
            Some(rec) => {
                if rec.status.is_committed() {
                    return self.drop_msg("Commit", "already committed");
                }
                let cmd_id = rec.command().id();
                rec.deps = deps;
                rec.seq = seq;
                rec.status = match kind {
                    CertKind::Fast => CommandStatus::CommittedFast,
                    CertKind::Slow => CommandStatus::CommittedSlow,
                };
                rec.evidence = Some(evidence);
                out.push(Action::Note(Note::Committed {
                    replica: self.id,
                    instance,
                    kind,
                    cmd: cmd_id,
                }));
                self.run_final(&mut out);
            }
            None => {
                if space.frozen && instance.slot >= space.next_slot {
                    return self.drop_msg("Commit", "frozen space has no such slot");
                }
                space
                    .pending_commits
                    .insert(instance.slot, PendingCommit { kind, deps, seq, evidence });
            }
        }
        out
    }

    /// Apply a commit that was waiting for this order to arrive.
    fn apply_pending_commit(&mut self, instance: InstanceId, out: &mut Vec<Action>) {
        let Some(space) = self.spaces.get_mut(&instance.space) else { return };
        let Some(p) = space.pending_commits.remove(&instance.slot) else { return };
        let mut more = self.commit_instance(instance, p.kind, p.deps, p.seq, p.evidence);
        out.append(&mut more);
    }

    // -- retransmissions and resend relays ------------------------------------

    fn on_retransmitted_request(&mut self, m: RequestMsg) -> Vec<Action> {
        if !cert::verify_request(&self.cfg.keys, &m) {
            return self.drop_msg("Request", "bad client signature");
        }
        let target = m.original_recipient.expect("retransmission form");
        if target as usize >= self.cfg.n {
            return self.drop_msg("Request", "bad original recipient");
        }
        let client = m.client();
        let t = m.t();
        if target == self.id {
            let seen_t = self.led_t.get(&client).copied().unwrap_or(0);
            if t < seen_t {
                return self.drop_msg("Request", "stale timestamp");
            }
            if t == seen_t {
                return self.resend_cached(client, t, Some(self.id));
            }
            let my_space = &self.spaces[&self.id];
            if my_space.frozen || my_space.committed_to_change {
                return self.drop_msg("Request", "own space not accepting proposals");
            }
            return self.order_request(m);
        }

        // Replies must reference the instance the client is pursuing: an
        // order in the named recipient's space. Holding the command in some
        // other space is not enough; relay onward so this replica learns the
        // current instance too.
        if self.seen_in(&(client, t), target).is_some() {
            return self.resend_cached(client, t, Some(target));
        }
        let space = &self.spaces[&target];
        if space.frozen {
            // The client's backoff will re-home it to a live replica.
            return self.drop_msg("Request", "target space frozen");
        }
        if space.committed_to_change {
            // The change may have stalled (votes or views lost to drops or a
            // partition); repeat our vote and view so it can complete.
            let owner = space.owner;
            let mut out = Vec::new();
            let msg = ProtocolMessage::StartOwnerChange(StartOwnerChangeMsg {
                space: target,
                owner,
            });
            self.broadcast_replicas(&msg, &mut out);
            out.extend(self.resend_owner_change(target, owner));
            return out;
        }
        self.resend_waits.insert((client, t), target);
        vec![
            Action::send(
                NodeId::Replica(target),
                ProtocolMessage::ResendReq(ResendReqMsg { request: m, forwarder: self.id }),
            ),
            Action::SetTimer {
                delay: self.cfg.resend_wait_us,
                kind: TimerKind::ResendWait { cmd: (client, t) },
            },
        ]
    }

    fn on_resend_req(&mut self, m: ResendReqMsg) -> Vec<Action> {
        if !cert::verify_request(&self.cfg.keys, &m.request) {
            return self.drop_msg("ResendReq", "bad client signature");
        }
        let client = m.request.client();
        let t = m.request.t();
        let seen_t = self.led_t.get(&client).copied().unwrap_or(0);
        if t <= seen_t {
            let mut out = self.resend_cached(client, t, Some(self.id));
            // Re-relay the order so the forwarder stops suspecting us and
            // learns the instance it is missing.
            if let Some(instance) = self.seen_in(&(client, t), self.id) {
                if let Some(rec) = self.record(instance) {
                    out.push(Action::send(
                        NodeId::Replica(m.forwarder),
                        ProtocolMessage::SpecOrder(rec.spec_order.clone()),
                    ));
                }
            }
            return out;
        }
        let my_space = &self.spaces[&self.id];
        if my_space.frozen || my_space.committed_to_change {
            return self.drop_msg("ResendReq", "own space not accepting proposals");
        }
        self.order_request(m.request)
    }

    fn on_resend_deadline(&mut self, cmd: CommandId) -> Vec<Action> {
        let Some(target) = self.resend_waits.remove(&cmd) else { return Vec::new() };
        if self.seen.contains_key(&cmd) {
            // Some order for the request arrived; the client is being
            // served and no ownership change is warranted.
            return Vec::new();
        }
        let owner = self.spaces[&target].owner;
        let mut out = Vec::new();
        let msg = ProtocolMessage::StartOwnerChange(StartOwnerChangeMsg { space: target, owner });
        self.broadcast_replicas(&msg, &mut out);
        let mut more = self.commit_to_change(target, owner);
        out.append(&mut more);
        out
    }

    fn on_buffer_deadline(&mut self, space_idx: u32, slot: u64) -> Vec<Action> {
        let space = self.spaces.get_mut(&space_idx).expect("space");
        if space.buffered.remove(&slot).is_some() {
            let mut out = self.drop_msg("SpecOrder", "buffered slot timed out");
            out.push(self.suspect(space_idx, "gap never filled"));
            return out;
        }
        Vec::new()
    }

    // -- ownership change -----------------------------------------------------

    fn on_pom(&mut self, src: NodeId, m: PomMsg) -> Vec<Action> {
        if !cert::verify_pom(&self.cfg.keys, self.cfg.n, &m) {
            let mut out = self.drop_msg("Pom", "invalid proof");
            if let NodeId::Replica(r) = src {
                out.push(self.suspect(r, "invalid pom"));
            }
            return out;
        }
        let space = m.owner.owner_index(self.cfg.n);
        let mut out = Vec::new();
        if self.spaces[&space].owner == m.owner && !self.spaces[&space].committed_to_change {
            let msg =
                ProtocolMessage::StartOwnerChange(StartOwnerChangeMsg { space, owner: m.owner });
            self.broadcast_replicas(&msg, &mut out);
        }
        let mut more = self.commit_to_change(space, m.owner);
        out.append(&mut more);
        out
    }

    fn on_start_owner_change(&mut self, src: NodeId, m: StartOwnerChangeMsg) -> Vec<Action> {
        let NodeId::Replica(sender) = src else {
            return self.drop_msg("StartOwnerChange", "not from a replica");
        };
        let Some(space) = self.spaces.get_mut(&m.space) else {
            return self.drop_msg("StartOwnerChange", "bad space");
        };
        if space.owner != m.owner {
            return self.drop_msg("StartOwnerChange", "stale owner number");
        }
        let votes = space.change_votes.entry(m.owner.0).or_default();
        votes.insert(sender);
        if votes.len() >= self.cfg.f + 1 {
            if self.spaces[&m.space].committed_to_change {
                // Our earlier view may have been lost; repeating it is
                // harmless and lets a stalled change complete.
                return self.resend_owner_change(m.space, m.owner);
            }
            return self.commit_to_change(m.space, m.owner);
        }
        Vec::new()
    }

    fn build_owner_change(&self, space_idx: u32, owner: OwnerNumber) -> OwnerChangeMsg {
        let space = &self.spaces[&space_idx];
        let entries: Vec<OwnerChangeEntry> = (space.checkpoint..space.next_slot)
            .filter_map(|slot| space.records.get(&slot))
            .map(|rec| OwnerChangeEntry {
                slot: rec.instance.slot,
                spec_order: rec.spec_order.clone(),
                commit: rec.evidence.clone(),
            })
            .collect();
        let mut oc = OwnerChangeMsg {
            space: space_idx,
            new_owner: owner.next(),
            checkpoint: space.checkpoint,
            entries,
            sender: self.id,
            sig: crate::crypto::Signature::zero(),
        };
        oc.sig = sign(&self.key, &types::signing_bytes(&ProtocolMessage::OwnerChange(oc.clone())));
        oc
    }

    fn resend_owner_change(&mut self, space_idx: u32, owner: OwnerNumber) -> Vec<Action> {
        let space = &self.spaces[&space_idx];
        if space.owner != owner || space.frozen || !space.committed_to_change {
            return Vec::new();
        }
        let oc = self.build_owner_change(space_idx, owner);
        let leader = owner.next().owner_index(self.cfg.n);
        vec![Action::send(NodeId::Replica(leader), ProtocolMessage::OwnerChange(oc))]
    }

    /// Stop participating in the space and send the new owner our view.
    fn commit_to_change(&mut self, space_idx: u32, owner: OwnerNumber) -> Vec<Action> {
        {
            let space = &self.spaces[&space_idx];
            if space.owner != owner || space.committed_to_change || space.frozen {
                return Vec::new();
            }
        }
        let oc = self.build_owner_change(space_idx, owner);
        let leader = owner.next().owner_index(self.cfg.n);
        self.spaces.get_mut(&space_idx).unwrap().committed_to_change = true;
        vec![
            Action::Note(Note::CommittedToChange { replica: self.id, space: space_idx, owner }),
            Action::send(NodeId::Replica(leader), ProtocolMessage::OwnerChange(oc)),
        ]
    }

    fn on_owner_change(&mut self, m: OwnerChangeMsg) -> Vec<Action> {
        if m.new_owner.owner_index(self.cfg.n) != self.id {
            return self.drop_msg("OwnerChange", "not the new owner");
        }
        let signing = types::signing_bytes(&ProtocolMessage::OwnerChange(m.clone()));
        if !self.cfg.keys.check(NodeId::Replica(m.sender), &signing, &m.sig) {
            return self.drop_msg("OwnerChange", "bad signature");
        }
        let Some(space) = self.spaces.get_mut(&m.space) else {
            return self.drop_msg("OwnerChange", "bad space");
        };
        if m.new_owner != space.owner.next() {
            return self.drop_msg("OwnerChange", "owner number mismatch");
        }
        let epoch = m.new_owner.0;
        let sender = m.sender;
        space.collected.entry(epoch).or_default().insert(sender, m);
        let have = space.collected[&epoch].len();
        if have < self.cfg.owner_change_quorum || space.announced.contains(&epoch) {
            return Vec::new();
        }
        space.announced.insert(epoch);
        let proof_map = space.collected[&epoch].clone();
        let space_idx = proof_map.values().next().unwrap().space;
        let safe = select_history(&self.cfg, space_idx, &proof_map);
        let mut no = NewOwnerMsg {
            space: space_idx,
            new_owner: OwnerNumber(epoch),
            proof: proof_map.into_values().collect(),
            safe,
            sender: self.id,
            sig: crate::crypto::Signature::zero(),
        };
        no.sig = sign(&self.key, &types::signing_bytes(&ProtocolMessage::NewOwner(no.clone())));
        let msg = ProtocolMessage::NewOwner(no);
        let mut out = Vec::new();
        self.broadcast_replicas(&msg, &mut out);
        // Apply our own announcement through the same validation path.
        let mut own = self.on_new_owner(match msg {
            ProtocolMessage::NewOwner(no) => no,
            _ => unreachable!(),
        });
        out.append(&mut own);
        out
    }

    fn on_new_owner(&mut self, m: NewOwnerMsg) -> Vec<Action> {
        if m.new_owner.owner_index(self.cfg.n) != m.sender {
            return self.drop_msg("NewOwner", "sender is not the owner it claims");
        }
        let signing = types::signing_bytes(&ProtocolMessage::NewOwner(m.clone()));
        if !self.cfg.keys.check(NodeId::Replica(m.sender), &signing, &m.sig) {
            return self.drop_msg("NewOwner", "bad signature");
        }
        {
            let Some(space) = self.spaces.get(&m.space) else {
                return self.drop_msg("NewOwner", "bad space");
            };
            if m.new_owner != space.owner.next() {
                return self.drop_msg("NewOwner", "owner number mismatch");
            }
        }
        if m.proof.len() < self.cfg.owner_change_quorum {
            let mut out = self.drop_msg("NewOwner", "proof set too small");
            out.push(self.suspect(m.sender, "undersized proof"));
            return out;
        }
        let mut proof_map = BTreeMap::new();
        for p in &m.proof {
            if p.space != m.space || p.new_owner != m.new_owner {
                let mut out = self.drop_msg("NewOwner", "foreign proof entry");
                out.push(self.suspect(m.sender, "foreign proof entry"));
                return out;
            }
            let sb = types::signing_bytes(&ProtocolMessage::OwnerChange(p.clone()));
            if !self.cfg.keys.check(NodeId::Replica(p.sender), &sb, &p.sig) {
                let mut out = self.drop_msg("NewOwner", "proof signature invalid");
                out.push(self.suspect(m.sender, "proof signature invalid"));
                return out;
            }
            if proof_map.insert(p.sender, p.clone()).is_some() {
                let mut out = self.drop_msg("NewOwner", "duplicate proof sender");
                out.push(self.suspect(m.sender, "duplicate proof sender"));
                return out;
            }
        }
        let derived = select_history(&self.cfg, m.space, &proof_map);
        if derived != m.safe {
            let mut out = self.drop_msg("NewOwner", "safe set not derivable from proof");
            out.push(self.suspect(m.sender, "underivable safe set"));
            return out;
        }

        // Committed instances must survive unchanged.
        let base = proof_map.values().map(|p| p.checkpoint).max().unwrap_or(0);
        let by_slot: BTreeMap<u64, &OwnerChangeEntry> =
            m.safe.iter().map(|e| (e.slot, e)).collect();
        {
            let space = &self.spaces[&m.space];
            for (slot, rec) in space.records.range(base..) {
                if !rec.status.is_committed() {
                    continue;
                }
                let surviving = by_slot
                    .get(slot)
                    .map(|e| e.spec_order.core.req_digest == rec.spec_order.core.req_digest)
                    .unwrap_or(false);
                if !surviving {
                    let mut out = self.drop_msg("NewOwner", "drops a committed instance");
                    out.push(self.suspect(m.sender, "dropped committed instance"));
                    return out;
                }
            }
        }

        self.apply_new_owner(&m, base)
    }

    fn apply_new_owner(&mut self, m: &NewOwnerMsg, base: u64) -> Vec<Action> {
        let mut out = Vec::new();
        let space_idx = m.space;

        // Remove records the safe set does not carry, and reconcile those it
        // does.
        let existing: Vec<u64> = self.spaces[&space_idx].records.range(base..).map(|(s, _)| *s).collect();
        let safe_ids: BTreeMap<u64, crate::crypto::Signature> =
            m.safe.iter().map(|e| (e.slot, e.spec_order.sig)).collect();
        for slot in existing {
            let keep = {
                let rec = &self.spaces[&space_idx].records[&slot];
                safe_ids.get(&slot).map(|sig| *sig == rec.spec_order.sig).unwrap_or(false)
            };
            if !keep {
                self.remove_record(InstanceId::new(space_idx, slot));
            }
        }
        for e in &m.safe {
            let (deps, seq, kind) = entry_metadata(&self.cfg, e);
            let instance = InstanceId::new(space_idx, e.slot);
            let status = match kind {
                Some(CertKind::Fast) => CommandStatus::CommittedFast,
                _ => CommandStatus::CommittedSlow,
            };
            let space = self.spaces.get_mut(&space_idx).unwrap();
            match space.records.get_mut(&e.slot) {
                Some(rec) => {
                    if rec.status.is_committed() && e.commit.is_none() {
                        // Keep locally certified metadata over bare orders.
                    } else if rec.status != CommandStatus::FinallyExecuted {
                        rec.deps = deps;
                        rec.seq = seq;
                        rec.status = status;
                        rec.evidence = e.commit.clone();
                    }
                }
                None => {
                    let cmd_id = e.spec_order.request.command.id();
                    let key = e.spec_order.request.command.key.clone();
                    space.records.insert(
                        e.slot,
                        CommandRecord {
                            instance,
                            spec_order: e.spec_order.clone(),
                            deps,
                            seq,
                            status,
                            spec_rep: None,
                            final_rep: None,
                            sent_reply: None,
                            evidence: e.commit.clone(),
                        },
                    );
                    self.key_index.entry(key).or_default().insert(instance);
                    self.seen.entry(cmd_id).or_default().insert(instance);
                }
            }
        }

        let space = self.spaces.get_mut(&space_idx).unwrap();
        space.owner = m.new_owner;
        space.frozen = true;
        space.committed_to_change = false;
        space.next_slot = m.safe.last().map(|e| e.slot + 1).unwrap_or(base);
        space.buffered.clear();
        space.pending_commits.retain(|slot, _| *slot < space.next_slot);

        out.push(Action::Note(Note::NewOwnerApplied {
            replica: self.id,
            space: space_idx,
            owner: m.new_owner,
            safe_len: m.safe.len() as u32,
        }));

        // Speculative state may reflect orders that no longer exist or whose
        // metadata changed; roll everything back and re-execute.
        self.rollback_speculation(&mut out);
        self.run_speculative(&mut out);
        self.run_final(&mut out);
        out
    }

    fn remove_record(&mut self, instance: InstanceId) {
        let Some(space) = self.spaces.get_mut(&instance.space) else { return };
        let Some(rec) = space.records.remove(&instance.slot) else { return };
        let cmd = rec.command();
        let cmd_id = cmd.id();
        if let Some(set) = self.key_index.get_mut(&cmd.key) {
            set.remove(&instance);
        }
        if let Some(set) = self.seen.get_mut(&cmd_id) {
            set.remove(&instance);
            if set.is_empty() {
                self.seen.remove(&cmd_id);
            }
        }
        if self.spec_reps.get(&cmd_id).map(|(i, _)| *i) == Some(instance) {
            self.spec_reps.remove(&cmd_id);
        }
        self.spec_done.remove(&instance);
    }

    fn rollback_speculation(&mut self, out: &mut Vec<Action>) {
        let undone = self.kv.rollback_all();
        if undone.is_empty() {
            return;
        }
        self.counters.rollbacks += 1;
        out.push(Action::Note(Note::Rollback { replica: self.id, undone: undone.len() as u32 }));
        for instance in undone {
            self.spec_done.remove(&instance);
            if let Some(rec) =
                self.spaces.get_mut(&instance.space).and_then(|s| s.records.get_mut(&instance.slot))
            {
                if rec.status == CommandStatus::SpecExecuted {
                    rec.status = CommandStatus::PreAccepted;
                    rec.spec_rep = None;
                }
            }
        }
        self.spec_reps.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::{Op, Value};
    use crate::testkit::TestNet;

    fn net() -> TestNet {
        TestNet::new(1, 2)
    }

    fn replica(net: &TestNet, id: u32) -> Replica {
        Replica::new(id, net.cfg.clone(), net.replica_key(id))
    }

    fn sent_msgs(actions: &[Action]) -> Vec<(&NodeId, &ProtocolMessage)> {
        actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { to, msg } => Some((to, msg)),
                _ => None,
            })
            .collect()
    }

    fn first_spec_reply(actions: &[Action]) -> Option<&SpecReplyMsg> {
        sent_msgs(actions).into_iter().find_map(|(_, m)| match m {
            ProtocolMessage::SpecReply(r) => Some(r),
            _ => None,
        })
    }

    #[test]
    fn first_command_gets_slot_zero_no_deps() {
        let net = net();
        let mut r0 = replica(&net, 0);
        let req = net.request(0, 1, "x", Op::Put(Value::Int(1)));
        let actions = r0.on_message(0, NodeId::Client(0), ProtocolMessage::Request(req));
        let reply = first_spec_reply(&actions).expect("leader replies");
        assert_eq!(reply.core.instance, InstanceId::new(0, 0));
        assert!(reply.core.deps.is_empty());
        assert_eq!(reply.core.seq, SeqNo(1));
        // Broadcast to the other three replicas.
        let so_count = sent_msgs(&actions)
            .iter()
            .filter(|(_, m)| matches!(m, ProtocolMessage::SpecOrder(_)))
            .count();
        assert_eq!(so_count, 3);
    }

    #[test]
    fn non_interfering_second_command_keeps_seq_one() {
        let net = net();
        let mut r0 = replica(&net, 0);
        let a = net.request(0, 1, "x", Op::Put(Value::Int(1)));
        r0.on_message(0, NodeId::Client(0), ProtocolMessage::Request(a));
        let b = net.request(1, 1, "y", Op::Put(Value::Int(2)));
        let actions = r0.on_message(1, NodeId::Client(1), ProtocolMessage::Request(b));
        let reply = first_spec_reply(&actions).unwrap();
        assert_eq!(reply.core.instance, InstanceId::new(0, 1));
        assert!(reply.core.deps.is_empty());
        assert_eq!(reply.core.seq, SeqNo(1));
    }

    #[test]
    fn interfering_command_depends_and_bumps_seq() {
        let net = net();
        let mut r0 = replica(&net, 0);
        let a = net.request(0, 1, "x", Op::Put(Value::Int(1)));
        r0.on_message(0, NodeId::Client(0), ProtocolMessage::Request(a));
        let b = net.request(1, 1, "x", Op::Put(Value::Int(2)));
        let actions = r0.on_message(1, NodeId::Client(1), ProtocolMessage::Request(b));
        let reply = first_spec_reply(&actions).unwrap();
        assert_eq!(reply.core.deps, [InstanceId::new(0, 0)].into_iter().collect::<DepSet>());
        assert_eq!(reply.core.seq, SeqNo(2));
    }

    /// The conflict walkthrough replayed at one replica: R2 already holds an
    /// interfering command, so the arriving order's metadata is updated.
    #[test]
    fn spec_order_updates_deps_and_seq_from_local_log() {
        let net = net();
        let mut r2 = replica(&net, 2);
        // L2 ordered by R3 at slot 0 arrives first.
        let l2_req = net.request(1, 1, "hot", Op::Put(Value::Int(2)));
        let l2 = net.spec_order(
            OwnerNumber(3),
            0,
            DepSet::new(),
            SeqNo(1),
            net.genesis(3),
            &l2_req,
        );
        let actions = r2.on_message(0, NodeId::Replica(3), ProtocolMessage::SpecOrder(l2));
        let reply = first_spec_reply(&actions).unwrap();
        assert!(reply.core.deps.is_empty());
        assert_eq!(reply.core.seq, SeqNo(1));

        // L1 ordered by R0 at slot 0 arrives second with empty deps.
        let l1_req = net.request(0, 1, "hot", Op::Put(Value::Int(1)));
        let l1 = net.spec_order(
            OwnerNumber(0),
            0,
            DepSet::new(),
            SeqNo(1),
            net.genesis(0),
            &l1_req,
        );
        let actions = r2.on_message(1, NodeId::Replica(0), ProtocolMessage::SpecOrder(l1));
        let reply = first_spec_reply(&actions).unwrap();
        assert_eq!(reply.core.deps, [InstanceId::new(3, 0)].into_iter().collect::<DepSet>());
        assert_eq!(reply.core.seq, SeqNo(2));
    }

    #[test]
    fn unchanged_metadata_when_no_local_interference() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "hot", Op::Put(Value::Int(1)));
        let so =
            net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        let actions = r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so));
        let reply = first_spec_reply(&actions).unwrap();
        assert!(reply.core.deps.is_empty());
        assert_eq!(reply.core.seq, SeqNo(1));
    }

    /// Contiguity: a gap buffers the order and produces no reply until the
    /// predecessor arrives.
    #[test]
    fn slot_gap_buffers_until_filled() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req_a = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        let so0 =
            net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req_a);
        let chain1 = crate::crypto::digest_parts(&[
            &net.genesis(0).0,
            &types::encode(&ProtocolMessage::SpecOrder(so0.clone())),
        ]);
        let req_b = net.request(1, 1, "b", Op::Put(Value::Int(2)));
        let so1 = net.spec_order(OwnerNumber(0), 1, DepSet::new(), SeqNo(1), chain1, &req_b);

        let actions = r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so1));
        assert!(first_spec_reply(&actions).is_none(), "gap must not be replied to");
        let actions = r1.on_message(1, NodeId::Replica(0), ProtocolMessage::SpecOrder(so0));
        let replies: Vec<_> = sent_msgs(&actions)
            .into_iter()
            .filter(|(_, m)| matches!(m, ProtocolMessage::SpecReply(_)))
            .collect();
        assert_eq!(replies.len(), 2, "both slots answered after the gap fills");
    }

    #[test]
    fn chain_mismatch_drops_and_suspects() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        let so = net.spec_order(
            OwnerNumber(0),
            0,
            DepSet::new(),
            SeqNo(1),
            crate::crypto::digest(b"wrong chain"),
            &req,
        );
        let actions = r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so));
        assert!(first_spec_reply(&actions).is_none());
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::Suspicion { .. }))));
    }

    #[test]
    fn stale_owner_number_is_dropped() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        // Owner number 4 maps to replica 0 but is not the space's current
        // number.
        let so = net.spec_order(OwnerNumber(4), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        let actions = r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so));
        assert!(first_spec_reply(&actions).is_none());
    }

    #[test]
    fn valid_fast_certificate_commits() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        let so = net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so.clone()));
        let cert = net.fast_cert(&so, Reply::Ack);
        let actions = r1.on_message(
            1,
            NodeId::Client(0),
            ProtocolMessage::CommitFast(CommitFastMsg {
                client: NodeId::Client(0),
                instance: so.core.instance,
                cert,
            }),
        );
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::Committed { kind: CertKind::Fast, .. }))));
        let rec = r1.record(so.core.instance).unwrap();
        assert_eq!(rec.status, CommandStatus::FinallyExecuted);
    }

    #[test]
    fn fast_certificate_with_one_mismatch_is_dropped() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        let so = net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so.clone()));
        let mut cert = net.fast_cert(&so, Reply::Ack);
        // One reply deviates in its dependency set.
        let deviant = net.spec_reply(
            3,
            &so,
            [InstanceId::new(2, 9)].into_iter().collect(),
            SeqNo(2),
            Reply::Ack,
        );
        cert.replies[3] = deviant;
        let actions = r1.on_message(
            1,
            NodeId::Client(0),
            ProtocolMessage::CommitFast(CommitFastMsg {
                client: NodeId::Client(0),
                instance: so.core.instance,
                cert,
            }),
        );
        assert!(actions.iter().any(|a| matches!(
            a,
            Action::Note(Note::Dropped { kind: "CommitFast", .. })
        )));
    }

    #[test]
    fn fast_certificate_with_duplicate_sender_is_dropped() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        let so = net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so.clone()));
        let mut cert = net.fast_cert(&so, Reply::Ack);
        cert.replies[3] = cert.replies[2].clone();
        let actions = r1.on_message(
            1,
            NodeId::Client(0),
            ProtocolMessage::CommitFast(CommitFastMsg {
                client: NodeId::Client(0),
                instance: so.core.instance,
                cert,
            }),
        );
        assert!(actions.iter().any(|a| matches!(
            a,
            Action::Note(Note::Dropped { kind: "CommitFast", .. })
        )));
    }

    /// A slow commit whose claimed metadata does not recombine from its own
    /// certificate is a byzantine-client forgery and must be dropped.
    #[test]
    fn commit_with_forged_metadata_is_dropped() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        let so = net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so.clone()));
        let cert = net.slow_cert(
            &so,
            &[
                (0, DepSet::new(), SeqNo(1)),
                (1, DepSet::new(), SeqNo(1)),
                (2, DepSet::new(), SeqNo(1)),
            ],
            Reply::Ack,
        );
        let mut commit = net.commit_msg(0, &so, cert);
        commit.deps.insert(InstanceId::new(2, 7));
        // Re-sign so only the recombination check can reject it.
        commit.sig = crate::crypto::sign(
            &net.client_key(0),
            &types::signing_bytes(&ProtocolMessage::Commit(commit.clone())),
        );
        let actions = r1.on_message(1, NodeId::Client(0), ProtocolMessage::Commit(commit));
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::Dropped { kind: "Commit", .. }))));
    }

    #[test]
    fn commit_after_fast_commit_is_idempotent() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let req = net.request(0, 1, "a", Op::Put(Value::Int(1)));
        let so = net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        r1.on_message(0, NodeId::Replica(0), ProtocolMessage::SpecOrder(so.clone()));
        let cert = net.fast_cert(&so, Reply::Ack);
        r1.on_message(
            1,
            NodeId::Client(0),
            ProtocolMessage::CommitFast(CommitFastMsg {
                client: NodeId::Client(0),
                instance: so.core.instance,
                cert,
            }),
        );
        let slow = net.slow_cert(
            &so,
            &[
                (0, DepSet::new(), SeqNo(1)),
                (1, DepSet::new(), SeqNo(1)),
                (2, DepSet::new(), SeqNo(1)),
            ],
            Reply::Ack,
        );
        let commit = net.commit_msg(0, &so, slow);
        let actions = r1.on_message(2, NodeId::Client(0), ProtocolMessage::Commit(commit));
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::Dropped { kind: "Commit", .. }))));
        let rec = r1.record(so.core.instance).unwrap();
        assert!(rec.deps.is_empty(), "committed metadata must not change");
    }

    #[test]
    fn duplicate_request_resends_cached_reply_without_new_instance() {
        let net = net();
        let mut r0 = replica(&net, 0);
        let req = net.request(0, 1, "x", Op::Put(Value::Int(1)));
        r0.on_message(0, NodeId::Client(0), ProtocolMessage::Request(req.clone()));
        assert_eq!(r0.space_len(0), 1);
        let actions = r0.on_message(1, NodeId::Client(0), ProtocolMessage::Request(req));
        assert_eq!(r0.space_len(0), 1, "duplicate must not occupy a new slot");
        assert!(first_spec_reply(&actions).is_some(), "cached reply resent");
    }

    #[test]
    fn stale_timestamp_is_dropped() {
        let net = net();
        let mut r0 = replica(&net, 0);
        let t2 = net.request(0, 2, "x", Op::Put(Value::Int(2)));
        r0.on_message(0, NodeId::Client(0), ProtocolMessage::Request(t2));
        let t1 = net.request(0, 1, "x", Op::Put(Value::Int(1)));
        let actions = r0.on_message(1, NodeId::Client(0), ProtocolMessage::Request(t1));
        assert!(first_spec_reply(&actions).is_none());
        assert_eq!(r0.space_len(0), 1);
    }

    #[test]
    fn f_plus_one_change_votes_commit_to_change() {
        let net = net();
        let mut r1 = replica(&net, 1);
        let soc = StartOwnerChangeMsg { space: 0, owner: OwnerNumber(0) };
        let a1 = r1.on_message(0, NodeId::Replica(2), ProtocolMessage::StartOwnerChange(soc.clone()));
        assert!(a1.is_empty(), "one vote is below the threshold");
        let a2 = r1.on_message(1, NodeId::Replica(3), ProtocolMessage::StartOwnerChange(soc));
        assert!(a2
            .iter()
            .any(|a| matches!(a, Action::Note(Note::CommittedToChange { space: 0, .. }))));
        // The view goes to the next owner, replica 1 itself.
        assert!(sent_msgs(&a2)
            .iter()
            .any(|(to, m)| matches!(m, ProtocolMessage::OwnerChange(_)) && **to == NodeId::Replica(1)));
    }

    #[test]
    fn verified_pom_triggers_immediate_change() {
        let net = net();
        let mut r2 = replica(&net, 2);
        let req = net.request(0, 1, "x", Op::Put(Value::Int(1)));
        let so_a = net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        let so_b = net.spec_order(OwnerNumber(0), 1, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        let pom = PomMsg {
            owner: OwnerNumber(0),
            first: net.spec_reply(1, &so_a, DepSet::new(), SeqNo(1), Reply::Ack),
            second: net.spec_reply(3, &so_b, DepSet::new(), SeqNo(1), Reply::Ack),
        };
        let actions = r2.on_message(0, NodeId::Client(0), ProtocolMessage::Pom(pom));
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::CommittedToChange { space: 0, .. }))));
    }

    #[test]
    fn invalid_pom_is_dropped() {
        let net = net();
        let mut r2 = replica(&net, 2);
        let req = net.request(0, 1, "x", Op::Put(Value::Int(1)));
        let so = net.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), net.genesis(0), &req);
        // Same instance on both sides: no equivocation.
        let pom = PomMsg {
            owner: OwnerNumber(0),
            first: net.spec_reply(1, &so, DepSet::new(), SeqNo(1), Reply::Ack),
            second: net.spec_reply(3, &so, DepSet::new(), SeqNo(1), Reply::Ack),
        };
        let actions = r2.on_message(0, NodeId::Client(0), ProtocolMessage::Pom(pom));
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::Dropped { kind: "Pom", .. }))));
        assert!(!actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::CommittedToChange { .. }))));
    }
}

#[cfg(test)]
mod checkpoint_tests {
    use super::*;
    use crate::kv::{Op, Value};
    use crate::testkit::TestNet;

    /// Checkpoint markers advance once a full interval of slots is finally
    /// executed, and owner-change views carry only the suffix.
    #[test]
    fn checkpoints_bound_owner_change_views() {
        let mut net = TestNet::new(1, 1);
        net.cfg.checkpoint_interval = 2;
        let mut r0 = Replica::new(0, net.cfg.clone(), net.replica_key(0));
        let mut r1 = Replica::new(1, net.cfg.clone(), net.replica_key(1));

        for t in 1..=4u64 {
            let req = net.request(0, t, &format!("k{t}"), Op::Put(Value::Int(t as i64)));
            let actions = r0.on_message(t, NodeId::Client(0), ProtocolMessage::Request(req));
            // Relay the order to r1 and fast-commit at both.
            let so = actions
                .iter()
                .find_map(|a| match a {
                    Action::Send { msg: ProtocolMessage::SpecOrder(so), .. } => Some(so.clone()),
                    _ => None,
                })
                .expect("order broadcast");
            r1.on_message(t, NodeId::Replica(0), ProtocolMessage::SpecOrder(so.clone()));
            let cf = CommitFastMsg {
                client: NodeId::Client(0),
                instance: so.core.instance,
                cert: net.fast_cert(&so, Reply::Ack),
            };
            r0.on_message(t, NodeId::Client(0), ProtocolMessage::CommitFast(cf.clone()));
            r1.on_message(t, NodeId::Client(0), ProtocolMessage::CommitFast(cf));
        }
        assert_eq!(r0.space_checkpoint(0), 4, "two full intervals executed");
        assert_eq!(r1.space_checkpoint(0), 4);

        // A change vote for r0's space now carries an empty view.
        let soc = StartOwnerChangeMsg { space: 0, owner: OwnerNumber(0) };
        let a = {
            r1.on_message(9, NodeId::Replica(2), ProtocolMessage::StartOwnerChange(soc.clone()));
            r1.on_message(9, NodeId::Replica(3), ProtocolMessage::StartOwnerChange(soc))
        };
        let oc = a
            .iter()
            .find_map(|x| match x {
                Action::Send { msg: ProtocolMessage::OwnerChange(m), .. } => Some(m.clone()),
                _ => None,
            })
            .expect("view sent");
        assert_eq!(oc.checkpoint, 4);
        assert!(oc.entries.is_empty(), "checkpointed slots are not re-shipped");
    }
}
