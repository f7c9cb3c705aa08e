//! Line-oriented run trace. Every record is fully determined by the
//! scenario and seed, so the digest of the whole log doubles as a run
//! fingerprint.

use crate::actions::{Note, SimTime};
use crate::crypto::{digest, Digest, NodeId};
use crate::types::ProtocolMessage;

#[derive(Debug, Default)]
pub struct TraceLog {
    buf: String,
    lines: u64,
}

fn node_str(n: NodeId) -> String {
    n.to_string()
}

fn msg_detail(msg: &ProtocolMessage) -> String {
    match msg {
        ProtocolMessage::Request(m) => format!("t={}", m.t()),
        ProtocolMessage::SpecOrder(m) => {
            format!("deps={} seq={} d={}", m.core.deps.len(), m.core.seq.0, m.core.req_digest.short_hex())
        }
        ProtocolMessage::SpecReply(m) => {
            format!("deps={} seq={} from=R{}", m.core.deps.len(), m.core.seq.0, m.sender)
        }
        ProtocolMessage::CommitFast(m) => format!("cc={}", m.cert.replies.len()),
        ProtocolMessage::Commit(m) => format!("deps={} seq={}", m.deps.len(), m.seq.0),
        ProtocolMessage::CommitReply(m) => format!("t={} from=R{}", m.t, m.sender),
        ProtocolMessage::ResendReq(m) => format!("t={} via=R{}", m.request.t(), m.forwarder),
        ProtocolMessage::Pom(m) => format!("owner={}", m.owner.0),
        ProtocolMessage::StartOwnerChange(m) => format!("owner={}", m.owner.0),
        ProtocolMessage::OwnerChange(m) => format!("entries={}", m.entries.len()),
        ProtocolMessage::NewOwner(m) => format!("safe={}", m.safe.len()),
    }
}

impl TraceLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn line_count(&self) -> u64 {
        self.lines
    }

    fn push(&mut self, line: String) -> u64 {
        self.buf.push_str(&line);
        self.buf.push('\n');
        self.lines += 1;
        self.lines
    }

    pub fn deliver(&mut self, time: SimTime, src: NodeId, dst: NodeId, msg: &ProtocolMessage) -> u64 {
        let inst = msg.instance().map(|i| i.to_string()).unwrap_or_else(|| "-".into());
        self.push(format!(
            "{} deliver {} {} {} {} {}",
            time,
            node_str(src),
            node_str(dst),
            msg.kind_str(),
            inst,
            msg_detail(msg)
        ))
    }

    pub fn drop_msg(
        &mut self,
        time: SimTime,
        src: NodeId,
        dst: NodeId,
        msg: &ProtocolMessage,
        reason: &str,
    ) -> u64 {
        let inst = msg.instance().map(|i| i.to_string()).unwrap_or_else(|| "-".into());
        self.push(format!(
            "{} netdrop {} {} {} {} {}",
            time,
            node_str(src),
            node_str(dst),
            msg.kind_str(),
            inst,
            reason
        ))
    }

    pub fn timer(&mut self, time: SimTime, node: NodeId, what: &str) -> u64 {
        self.push(format!("{} timer {} - {} - -", time, node_str(node), what))
    }

    pub fn note(&mut self, time: SimTime, note: &Note) -> u64 {
        let line = match note {
            Note::Submitted { client, t } => {
                format!("{} note {} - submit - t={}", time, node_str(*client), t)
            }
            Note::Delivered { client, t, path, instance, .. } => format!(
                "{} note {} - deliver {} t={} path={}",
                time,
                node_str(*client),
                instance,
                t,
                match path {
                    crate::actions::Path::Fast => "fast",
                    crate::actions::Path::Slow => "slow",
                }
            ),
            Note::SpecExecuted { replica, instance, cmd } => format!(
                "{} note R{} - spec-exec {} cmd={}:{}",
                time, replica, instance, cmd.0, cmd.1
            ),
            Note::Committed { replica, instance, kind, cmd } => format!(
                "{} note R{} - commit {} kind={} cmd={}:{}",
                time,
                replica,
                instance,
                match kind {
                    crate::types::CertKind::Fast => "fast",
                    crate::types::CertKind::Slow => "slow",
                },
                cmd.0,
                cmd.1
            ),
            Note::FinalExecuted { replica, instance, cmd } => format!(
                "{} note R{} - final-exec {} cmd={}:{}",
                time, replica, instance, cmd.0, cmd.1
            ),
            Note::Rollback { replica, undone } => {
                format!("{} note R{} - rollback - undone={}", time, replica, undone)
            }
            Note::PomEmitted { client, space, owner } => format!(
                "{} note {} - pom R{} owner={}",
                time,
                node_str(*client),
                space,
                owner.0
            ),
            Note::CommittedToChange { replica, space, owner } => format!(
                "{} note R{} - commit-to-change R{} owner={}",
                time, replica, space, owner.0
            ),
            Note::NewOwnerApplied { replica, space, owner, safe_len } => format!(
                "{} note R{} - new-owner R{} owner={} safe={}",
                time, replica, space, owner.0, safe_len
            ),
            Note::Rehomed { client, home } => {
                format!("{} note {} - rehome R{} -", time, node_str(*client), home)
            }
            Note::Dropped { node, kind, reason } => {
                format!("{} note {} - drop - {}:{}", time, node_str(*node), kind, reason)
            }
            Note::Suspicion { node, about, reason } => {
                format!("{} note {} - suspect R{} {}", time, node_str(*node), about, reason)
            }
        };
        self.push(line)
    }

    pub fn raw(&mut self, line: String) -> u64 {
        self.push(line)
    }

    pub fn contents(&self) -> &str {
        &self.buf
    }

    pub fn digest(&self) -> Digest {
        digest(self.buf.as_bytes())
    }
}
