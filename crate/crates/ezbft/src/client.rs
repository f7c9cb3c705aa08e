//! The client-side protocol state machine: request submission, reply
//! collection, the fast/slow path decision, dependency combining,
//! equivocation detection, retransmission, and delivery to the application.

use crate::actions::{Action, Note, Path, ProtocolConfig, SimTime, TimerKind};
use crate::cert;
use crate::crypto::{sign, Digest, KeyPair, NodeId, Signature};
use crate::kv::{Command, Op, Reply};
use crate::types::{
    self, CertKind, CommitCertificate, CommitFastMsg, CommitMsg, CommitReplyMsg, InstanceId,
    PomMsg, ProtocolMessage, RequestMsg, SpecReplyMsg,
};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Waiting for speculative replies.
    SpecWait,
    /// A slow commit has been broadcast; waiting for commit replies.
    SlowWait,
}

#[derive(Debug)]
struct Pending {
    cmd: Command,
    t: u64,
    /// Digests of every request form sent for this command; replies must
    /// reference one of them.
    digests: BTreeSet<Digest>,
    replies: BTreeMap<(InstanceId, u32), SpecReplyMsg>,
    phase: Phase,
    commit_instance: Option<InstanceId>,
    commit_msg: Option<CommitMsg>,
    /// Commit replies per (instance, result), by distinct sender.
    commit_tally: BTreeMap<(InstanceId, Reply), BTreeSet<u32>>,
    pom_sent: bool,
    retransmits: u32,
    arm: u32,
}

/// One drained workload item.
#[derive(Debug, Clone)]
pub struct WorkItem {
    pub key: Vec<u8>,
    pub op: Op,
}

pub struct Client {
    id: NodeId,
    cfg: ProtocolConfig,
    key: KeyPair,
    home: u32,
    next_t: u64,
    queue: VecDeque<WorkItem>,
    pending: Option<Pending>,
    pub delivered: Vec<(u64, Reply, Path)>,
}

impl Client {
    pub fn new(index: u32, cfg: ProtocolConfig, key: KeyPair, home: u32, work: Vec<WorkItem>) -> Self {
        Client {
            id: NodeId::Client(index),
            cfg,
            key,
            home,
            next_t: 0,
            queue: work.into(),
            pending: None,
            delivered: Vec::new(),
        }
    }

    pub fn node_id(&self) -> NodeId {
        self.id
    }

    pub fn idle(&self) -> bool {
        self.pending.is_none() && self.queue.is_empty()
    }

    pub fn outstanding(&self) -> usize {
        self.queue.len() + usize::from(self.pending.is_some())
    }

    // -- dispatch ------------------------------------------------------------

    pub fn on_message(&mut self, _now: SimTime, src: NodeId, msg: ProtocolMessage) -> Vec<Action> {
        match msg {
            ProtocolMessage::SpecReply(m) => self.on_spec_reply(m),
            ProtocolMessage::CommitReply(m) => self.on_commit_reply(src, m),
            _ => Vec::new(),
        }
    }

    pub fn on_timer(&mut self, _now: SimTime, kind: TimerKind) -> Vec<Action> {
        match kind {
            TimerKind::Start => self.submit_next(),
            TimerKind::SlowPath { t, arm } => self.on_slow_timer(t, arm),
            TimerKind::Retransmit { t, arm } => self.on_retransmit_timer(t, arm),
            _ => Vec::new(),
        }
    }

    // -- submission ----------------------------------------------------------

    /// Issue the next queued command. Closed loop: at most one request is
    /// ever pending.
    fn submit_next(&mut self) -> Vec<Action> {
        if self.pending.is_some() {
            return Vec::new();
        }
        let Some(item) = self.queue.pop_front() else { return Vec::new() };
        self.next_t += 1;
        let t = self.next_t;
        let cmd = Command { client: self.id, t, key: item.key, op: item.op };
        let req = self.build_request(cmd.clone(), None);
        let d = types::request_digest(&req);
        self.pending = Some(Pending {
            cmd,
            t,
            digests: [d].into_iter().collect(),
            replies: BTreeMap::new(),
            phase: Phase::SpecWait,
            commit_instance: None,
            commit_msg: None,
            commit_tally: BTreeMap::new(),
            pom_sent: false,
            retransmits: 0,
            arm: 0,
        });
        vec![
            Action::Note(Note::Submitted { client: self.id, t }),
            Action::send(NodeId::Replica(self.home), ProtocolMessage::Request(req)),
            Action::SetTimer {
                delay: self.cfg.slow_timer_us,
                kind: TimerKind::SlowPath { t, arm: 0 },
            },
            Action::SetTimer {
                delay: self.cfg.retransmit_timer_us,
                kind: TimerKind::Retransmit { t, arm: 0 },
            },
        ]
    }

    fn build_request(&self, cmd: Command, original_recipient: Option<u32>) -> RequestMsg {
        let mut req = RequestMsg { command: cmd, original_recipient, sig: Signature::zero() };
        req.sig = sign(&self.key, &types::signing_bytes(&ProtocolMessage::Request(req.clone())));
        req
    }

    // -- reply collection ------------------------------------------------------

    fn on_spec_reply(&mut self, m: SpecReplyMsg) -> Vec<Action> {
        let Some(p) = &mut self.pending else { return Vec::new() };
        if m.core.client != self.id || m.core.t != p.t || !p.digests.contains(&m.core.req_digest) {
            return Vec::new();
        }
        if !cert::verify_spec_reply(&self.cfg.keys, self.cfg.n, &m) {
            return Vec::new();
        }
        p.replies.entry((m.core.instance, m.sender)).or_insert(m.clone());

        let mut out = Vec::new();

        // Equivocation check: two leader-signed orders for the same request
        // digest at different instances.
        if !p.pom_sent {
            let conflict = p.replies.values().find(|other| {
                other.so_core.owner == m.so_core.owner
                    && other.so_core.req_digest == m.so_core.req_digest
                    && other.so_core.instance != m.so_core.instance
            });
            if let Some(other) = conflict {
                let pom = PomMsg { owner: m.so_core.owner, first: other.clone(), second: m.clone() };
                p.pom_sent = true;
                let space = m.so_core.owner.owner_index(self.cfg.n);
                out.push(Action::Note(Note::PomEmitted {
                    client: self.id,
                    space,
                    owner: m.so_core.owner,
                }));
                let msg = ProtocolMessage::Pom(pom);
                for r in 0..self.cfg.n as u32 {
                    out.push(Action::send(NodeId::Replica(r), msg.clone()));
                }
            }
        }

        // Fast path: all 3f+1 replicas replied and every reply matches.
        let matching: Vec<&SpecReplyMsg> = p
            .replies
            .values()
            .filter(|r| types::match_spec_replies(r, &m))
            .collect();
        let senders: BTreeSet<u32> = matching.iter().map(|r| r.sender).collect();
        if senders.len() == self.cfg.fast_quorum() {
            let cert = CommitCertificate {
                kind: CertKind::Fast,
                replies: matching.into_iter().cloned().collect(),
            };
            let rep = m.rep.clone();
            let instance = m.core.instance;
            out.extend(self.deliver(rep, Path::Fast, instance));
            let msg = ProtocolMessage::CommitFast(CommitFastMsg {
                client: self.id,
                instance,
                cert,
            });
            for r in 0..self.cfg.n as u32 {
                out.push(Action::send(NodeId::Replica(r), msg.clone()));
            }
        }
        out
    }

    fn deliver(&mut self, rep: Reply, path: Path, instance: InstanceId) -> Vec<Action> {
        let p = self.pending.take().expect("delivery without pending");
        self.delivered.push((p.t, rep.clone(), path));
        let mut out = vec![Action::Note(Note::Delivered {
            client: self.id,
            t: p.t,
            path,
            rep,
            instance,
        })];
        out.extend(self.submit_next());
        out
    }

    // -- slow path ---------------------------------------------------------------

    fn on_slow_timer(&mut self, t: u64, arm: u32) -> Vec<Action> {
        let Some(p) = &mut self.pending else { return Vec::new() };
        if p.t != t || p.arm != arm || p.phase != Phase::SpecWait {
            return Vec::new();
        }

        // Group replies by instance and look for a full designated quorum.
        let mut groups: BTreeMap<InstanceId, Vec<&SpecReplyMsg>> = BTreeMap::new();
        for r in p.replies.values() {
            groups.entry(r.core.instance).or_default().push(r);
        }
        let mut best: Option<(usize, InstanceId, Vec<&SpecReplyMsg>)> = None;
        for (instance, replies) in &groups {
            let leader = replies[0].core.owner.owner_index(self.cfg.n);
            let quorum = self.cfg.quorum_of(leader);
            let from_quorum: Vec<&SpecReplyMsg> = replies
                .iter()
                .copied()
                .filter(|r| quorum.contains(&r.sender))
                .collect();
            let senders: BTreeSet<u32> = from_quorum.iter().map(|r| r.sender).collect();
            if senders.len() >= self.cfg.slow_quorum_size() {
                let better = match &best {
                    None => true,
                    Some((n, i, _)) => senders.len() > *n || (senders.len() == *n && instance < i),
                };
                if better {
                    best = Some((senders.len(), *instance, from_quorum));
                }
            }
        }

        let Some((_, instance, quorum_replies)) = best else {
            // Not enough replies to combine: escalate straight away.
            return self.retransmit();
        };

        let (deps, seq) = cert::combine(quorum_replies.iter().copied());
        let cert = CommitCertificate {
            kind: CertKind::Slow,
            replies: quorum_replies.into_iter().cloned().collect(),
        };
        let mut commit = CommitMsg {
            client: self.id,
            instance,
            deps,
            seq,
            cert,
            sig: Signature::zero(),
        };
        commit.sig =
            sign(&self.key, &types::signing_bytes(&ProtocolMessage::Commit(commit.clone())));

        let p = self.pending.as_mut().expect("still pending");
        p.phase = Phase::SlowWait;
        p.commit_instance = Some(instance);
        p.commit_msg = Some(commit.clone());

        let msg = ProtocolMessage::Commit(commit);
        let mut out = Vec::new();
        for r in 0..self.cfg.n as u32 {
            out.push(Action::send(NodeId::Replica(r), msg.clone()));
        }
        out
    }

    fn on_commit_reply(&mut self, src: NodeId, m: CommitReplyMsg) -> Vec<Action> {
        let Some(p) = &mut self.pending else { return Vec::new() };
        if m.client != self.id || m.t != p.t {
            return Vec::new();
        }
        let NodeId::Replica(sender) = src else { return Vec::new() };
        if sender != m.sender {
            return Vec::new();
        }
        // Commit replies may also arrive after an ownership change decided
        // the command without this client's own commit; accept them whenever
        // the request is still pending.
        p.commit_tally.entry((m.instance, m.rep.clone())).or_default().insert(sender);
        let quorum = self.cfg.slow_quorum_size();
        let reached = p
            .commit_tally
            .iter()
            .find(|(_, senders)| senders.len() >= quorum)
            .map(|((instance, rep), _)| (*instance, rep.clone()));
        if let Some((instance, rep)) = reached {
            return self.deliver(rep, Path::Slow, instance);
        }
        Vec::new()
    }

    // -- retransmission -----------------------------------------------------------

    fn on_retransmit_timer(&mut self, t: u64, arm: u32) -> Vec<Action> {
        let Some(p) = &self.pending else { return Vec::new() };
        if p.t != t || p.arm != arm {
            return Vec::new();
        }
        self.retransmit()
    }

    /// Broadcast the retransmission form, possibly move home, and re-arm
    /// both timers with exponential backoff.
    fn retransmit(&mut self) -> Vec<Action> {
        let (cmd, old_home) = {
            let p = self.pending.as_ref().expect("pending");
            (p.cmd.clone(), self.home)
        };
        let mut out = Vec::new();

        let broadcast = self.build_request(cmd.clone(), Some(old_home));
        let bd = types::request_digest(&broadcast);
        let msg = ProtocolMessage::Request(broadcast);
        for r in 0..self.cfg.n as u32 {
            out.push(Action::send(NodeId::Replica(r), msg.clone()));
        }

        // In the slow phase the commit itself may have been lost; repeat it.
        if let Some(commit) = self.pending.as_ref().and_then(|p| p.commit_msg.clone()) {
            let msg = ProtocolMessage::Commit(commit);
            for r in 0..self.cfg.n as u32 {
                out.push(Action::send(NodeId::Replica(r), msg.clone()));
            }
        }

        let rehome = {
            let p = self.pending.as_mut().expect("pending");
            p.digests.insert(bd);
            p.retransmits += 1;
            p.arm += 1;
            p.retransmits % self.cfg.rehome_after == 0 && p.phase == Phase::SpecWait
        };
        if rehome {
            self.home = (self.home + 1) % self.cfg.n as u32;
            out.push(Action::Note(Note::Rehomed { client: self.id, home: self.home }));
            let fresh = self.build_request(cmd, None);
            let fd = types::request_digest(&fresh);
            let p = self.pending.as_mut().expect("pending");
            p.digests.insert(fd);
            out.push(Action::send(NodeId::Replica(self.home), ProtocolMessage::Request(fresh)));
        }

        let p = self.pending.as_mut().expect("pending");
        let exp = p.retransmits.min(self.cfg.backoff_cap);
        let factor = 1u64 << exp;
        out.push(Action::SetTimer {
            delay: self.cfg.slow_timer_us.saturating_mul(factor),
            kind: TimerKind::SlowPath { t: p.t, arm: p.arm },
        });
        out.push(Action::SetTimer {
            delay: self.cfg.retransmit_timer_us.saturating_mul(factor),
            kind: TimerKind::Retransmit { t: p.t, arm: p.arm },
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::Value;
    use crate::testkit::TestNet;
    use crate::types::{DepSet, InstanceId, OwnerNumber, SeqNo, SpecOrderMsg};

    fn net() -> TestNet {
        TestNet::new(1, 2)
    }

    fn client_with_work(net: &TestNet, items: usize) -> Client {
        let work = (0..items)
            .map(|i| WorkItem { key: format!("k{i}").into_bytes(), op: Op::Put(Value::Int(i as i64)) })
            .collect();
        Client::new(0, net.cfg.clone(), net.client_key(0), 0, work)
    }

    fn start(c: &mut Client) -> Vec<Action> {
        c.on_timer(0, TimerKind::Start)
    }

    fn order_for(net: &TestNet, c: &Client, slot: u64) -> SpecOrderMsg {
        // Rebuild the same request the client signed, then wrap it.
        let p = c.pending.as_ref().expect("pending");
        let req = RequestMsg {
            command: p.cmd.clone(),
            original_recipient: None,
            sig: Signature::zero(),
        };
        let mut req = req;
        req.sig = crate::crypto::sign(
            &net.client_key(0),
            &types::signing_bytes(&ProtocolMessage::Request(req.clone())),
        );
        net.spec_order(OwnerNumber(0), slot, DepSet::new(), SeqNo(1), net.genesis(0), &req)
    }

    #[test]
    fn submit_uses_monotone_timestamps() {
        let netx = net();
        let mut c = client_with_work(&netx, 2);
        let actions = start(&mut c);
        assert!(actions
            .iter()
            .any(|a| matches!(a, Action::Note(Note::Submitted { t: 1, .. }))));
        // Deliver fast to move to the second command.
        let so = order_for(&netx, &c, 0);
        for r in 0..4u32 {
            let reply = netx.spec_reply(r, &so, DepSet::new(), SeqNo(1), Reply::Ack);
            let out = c.on_message(1, NodeId::Replica(r), ProtocolMessage::SpecReply(reply));
            if r == 3 {
                assert!(out
                    .iter()
                    .any(|a| matches!(a, Action::Note(Note::Submitted { t: 2, .. }))));
            }
        }
    }

    #[test]
    fn four_matching_replies_deliver_fast_and_emit_certificate() {
        let netx = net();
        let mut c = client_with_work(&netx, 1);
        start(&mut c);
        let so = order_for(&netx, &c, 0);
        let mut delivered = false;
        let mut commit_fast = 0;
        for r in 0..4u32 {
            let reply = netx.spec_reply(r, &so, DepSet::new(), SeqNo(1), Reply::Ack);
            let out = c.on_message(1, NodeId::Replica(r), ProtocolMessage::SpecReply(reply));
            for a in &out {
                match a {
                    Action::Note(Note::Delivered { path: Path::Fast, .. }) => delivered = true,
                    Action::Send { msg: ProtocolMessage::CommitFast(cf), .. } => {
                        assert_eq!(cf.cert.replies.len(), 4);
                        commit_fast += 1;
                    }
                    _ => {}
                }
            }
        }
        assert!(delivered);
        assert_eq!(commit_fast, 4, "certificate broadcast to every replica");
    }

    #[test]
    fn three_of_four_matching_waits() {
        let netx = net();
        let mut c = client_with_work(&netx, 1);
        start(&mut c);
        let so = order_for(&netx, &c, 0);
        for r in 0..3u32 {
            let reply = netx.spec_reply(r, &so, DepSet::new(), SeqNo(1), Reply::Ack);
            let out = c.on_message(1, NodeId::Replica(r), ProtocolMessage::SpecReply(reply));
            assert!(!out
                .iter()
                .any(|a| matches!(a, Action::Note(Note::Delivered { .. }))));
        }
    }

    /// Conflicting leader-signed orders for the same request digest yield a
    /// verifying proof of misbehavior.
    #[test]
    fn equivocating_orders_produce_pom() {
        let netx = net();
        let mut c = client_with_work(&netx, 1);
        start(&mut c);
        let so_a = order_for(&netx, &c, 0);
        let so_b = order_for(&netx, &c, 1);
        let r1 = netx.spec_reply(1, &so_a, DepSet::new(), SeqNo(1), Reply::Ack);
        c.on_message(1, NodeId::Replica(1), ProtocolMessage::SpecReply(r1));
        let r2 = netx.spec_reply(2, &so_b, DepSet::new(), SeqNo(1), Reply::Ack);
        let out = c.on_message(2, NodeId::Replica(2), ProtocolMessage::SpecReply(r2));
        let pom = out
            .iter()
            .find_map(|a| match a {
                Action::Send { msg: ProtocolMessage::Pom(p), .. } => Some(p.clone()),
                _ => None,
            })
            .expect("pom broadcast");
        assert!(crate::cert::verify_pom(&netx.cfg.keys, netx.cfg.n, &pom));
    }

    #[test]
    fn slow_timer_combines_quorum_metadata() {
        let netx = net();
        let mut c = client_with_work(&netx, 1);
        start(&mut c);
        let so = order_for(&netx, &c, 0);
        let dep: DepSet = [InstanceId::new(3, 0)].into_iter().collect();
        let views = [
            (0u32, DepSet::new(), SeqNo(1)),
            (1u32, DepSet::new(), SeqNo(1)),
            (2u32, dep.clone(), SeqNo(2)),
        ];
        for (r, deps, seq) in &views {
            let reply = netx.spec_reply(*r, &so, deps.clone(), *seq, Reply::Ack);
            c.on_message(1, NodeId::Replica(*r), ProtocolMessage::SpecReply(reply));
        }
        let out = c.on_timer(2, TimerKind::SlowPath { t: 1, arm: 0 });
        let commit = out
            .iter()
            .find_map(|a| match a {
                Action::Send { msg: ProtocolMessage::Commit(m), .. } => Some(m.clone()),
                _ => None,
            })
            .expect("slow commit broadcast");
        assert_eq!(commit.deps, dep);
        assert_eq!(commit.seq, SeqNo(2));
        assert_eq!(commit.cert.replies.len(), 3);
    }

    #[test]
    fn commit_replies_deliver_at_quorum() {
        let netx = net();
        let mut c = client_with_work(&netx, 1);
        start(&mut c);
        let so = order_for(&netx, &c, 0);
        for r in 0..3u32 {
            let reply = netx.spec_reply(r, &so, DepSet::new(), SeqNo(1), Reply::Ack);
            c.on_message(1, NodeId::Replica(r), ProtocolMessage::SpecReply(reply));
        }
        c.on_timer(2, TimerKind::SlowPath { t: 1, arm: 0 });
        let instance = so.core.instance;
        let mut delivered = false;
        for r in 0..3u32 {
            let cr = CommitReplyMsg {
                client: NodeId::Client(0),
                t: 1,
                instance,
                rep: Reply::Ack,
                sender: r,
            };
            let out = c.on_message(3, NodeId::Replica(r), ProtocolMessage::CommitReply(cr));
            if r == 2 {
                delivered = out.iter().any(|a| {
                    matches!(a, Action::Note(Note::Delivered { path: Path::Slow, .. }))
                });
            }
        }
        assert!(delivered);
    }

    #[test]
    fn mismatched_commit_replies_keep_waiting() {
        let netx = net();
        let mut c = client_with_work(&netx, 1);
        start(&mut c);
        let so = order_for(&netx, &c, 0);
        for r in 0..3u32 {
            let reply = netx.spec_reply(r, &so, DepSet::new(), SeqNo(1), Reply::Ack);
            c.on_message(1, NodeId::Replica(r), ProtocolMessage::SpecReply(reply));
        }
        c.on_timer(2, TimerKind::SlowPath { t: 1, arm: 0 });
        let instance = so.core.instance;
        let reps =
            [Reply::Ack, Reply::Value(Value::Int(3)), Reply::Ack];
        let mut delivered = false;
        for (r, rep) in reps.iter().enumerate() {
            let cr = CommitReplyMsg {
                client: NodeId::Client(0),
                t: 1,
                instance,
                rep: rep.clone(),
                sender: r as u32,
            };
            let out =
                c.on_message(3, NodeId::Replica(r as u32), ProtocolMessage::CommitReply(cr));
            delivered |= out.iter().any(|a| matches!(a, Action::Note(Note::Delivered { .. })));
        }
        assert!(!delivered, "two matching replies are below the quorum");
    }

    #[test]
    fn retransmission_broadcasts_and_rehomes_after_cycles() {
        let netx = net();
        let mut c = client_with_work(&netx, 1);
        start(&mut c);
        let out = c.on_timer(1, TimerKind::Retransmit { t: 1, arm: 0 });
        let broadcast: Vec<_> = out
            .iter()
            .filter_map(|a| match a {
                Action::Send { msg: ProtocolMessage::Request(r), .. } => Some(r),
                _ => None,
            })
            .collect();
        assert_eq!(broadcast.len(), 4);
        assert!(broadcast.iter().all(|r| r.original_recipient == Some(0)));

        // Second cycle re-homes to the next replica with a fresh plain form.
        let out = c.on_timer(2, TimerKind::Retransmit { t: 1, arm: 1 });
        assert!(out
            .iter()
            .any(|a| matches!(a, Action::Note(Note::Rehomed { home: 1, .. }))));
        let fresh = out.iter().any(|a| {
            matches!(a, Action::Send { to: NodeId::Replica(1), msg: ProtocolMessage::Request(r) }
                if r.original_recipient.is_none())
        });
        assert!(fresh);
    }
}
