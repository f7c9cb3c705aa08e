//! Certificate and evidence validation. Every check here is a pure function
//! of the message bytes plus the public-key table.

use crate::crypto::{KeyTable, NodeId};
use crate::types::{
    self, CertKind, CommitCertificate, CommitEvidence, CommitMsg, DepSet, InstanceId, PomMsg,
    ProtocolMessage, SeqNo, SpecOrderMsg, SpecReplyMsg,
};
use std::collections::BTreeSet;

/// Verify both signature layers of a speculative reply: the sender's
/// signature over the reply core and the command-leader's signature over the
/// embedded order core, plus the structural ties between the two.
pub fn verify_spec_reply(keys: &KeyTable, n: usize, r: &SpecReplyMsg) -> bool {
    if r.sender as usize >= n {
        return false;
    }
    if r.core.instance != r.so_core.instance
        || r.core.owner != r.so_core.owner
        || r.core.req_digest != r.so_core.req_digest
    {
        return false;
    }
    if !keys.check(NodeId::Replica(r.sender), &types::sr_signing_bytes(&r.core), &r.sig) {
        return false;
    }
    let leader = r.so_core.owner.owner_index(n);
    keys.check(NodeId::Replica(leader), &types::so_signing_bytes(&r.so_core), &r.so_sig)
}

/// Verify a full SpecOrder message: leader signature over the core plus the
/// embedded client-signed request, whose digest must match the core's.
pub fn verify_spec_order(keys: &KeyTable, n: usize, so: &SpecOrderMsg) -> bool {
    let leader = so.core.owner.owner_index(n);
    if !keys.check(NodeId::Replica(leader), &types::so_signing_bytes(&so.core), &so.sig) {
        return false;
    }
    if !verify_request(keys, &so.request) {
        return false;
    }
    types::request_digest(&so.request) == so.core.req_digest
}

pub fn verify_request(keys: &KeyTable, r: &crate::types::RequestMsg) -> bool {
    let signing = types::signing_bytes(&ProtocolMessage::Request(r.clone()));
    keys.check(r.command.client, &signing, &r.sig)
}

/// Validate a fast certificate: 3f+1 verified replies from distinct senders
/// covering every replica, all matching on the seven fast-path fields, all
/// for `instance`. Returns the certified (deps, seq) on success.
pub fn verify_fast_cert(
    keys: &KeyTable,
    n: usize,
    cert: &CommitCertificate,
    instance: InstanceId,
) -> Option<(DepSet, SeqNo)> {
    if cert.kind != CertKind::Fast || cert.replies.len() != n {
        return None;
    }
    let mut senders = BTreeSet::new();
    let first = cert.replies.first()?;
    for r in &cert.replies {
        if r.core.instance != instance || !senders.insert(r.sender) {
            return None;
        }
        if !types::match_spec_replies(first, r) {
            return None;
        }
        if !verify_spec_reply(keys, n, r) {
            return None;
        }
    }
    if senders.len() != n {
        return None;
    }
    Some((first.core.deps.clone(), first.core.seq))
}

/// Validate a slow certificate: 2f+1 verified replies for `instance` from
/// distinct members of the leader's designated quorum.
pub fn verify_slow_cert(
    keys: &KeyTable,
    n: usize,
    f: usize,
    quorum: &BTreeSet<u32>,
    cert: &CommitCertificate,
    instance: InstanceId,
) -> bool {
    if cert.kind != CertKind::Slow || cert.replies.len() < 2 * f + 1 {
        return false;
    }
    let mut senders = BTreeSet::new();
    for r in &cert.replies {
        if r.core.instance != instance || !quorum.contains(&r.sender) || !senders.insert(r.sender) {
            return false;
        }
        if !verify_spec_reply(keys, n, r) {
            return false;
        }
    }
    true
}

/// Combine the reply metadata from a slow quorum: the final dependency set
/// is the union, and the sequence number is the reported maximum. Each
/// reported seq already dominates that reply's dependency set, and every
/// member of the union appears in some reply, so the maximum dominates the
/// whole union.
pub fn combine<'a, I>(replies: I) -> (DepSet, SeqNo)
where
    I: IntoIterator<Item = &'a SpecReplyMsg>,
{
    let mut deps = DepSet::new();
    let mut max_seq = SeqNo(1);
    for r in replies {
        deps.extend(r.core.deps.iter().copied());
        max_seq = max_seq.max(r.core.seq);
    }
    (deps, max_seq)
}

/// Validate a client-signed slow commit end to end: signature, certificate,
/// and that recombining the certificate reproduces the claimed metadata.
pub fn verify_commit(
    keys: &KeyTable,
    n: usize,
    f: usize,
    quorum: &BTreeSet<u32>,
    m: &CommitMsg,
) -> bool {
    let signing = types::signing_bytes(&ProtocolMessage::Commit(m.clone()));
    if !keys.check(m.client, &signing, &m.sig) {
        return false;
    }
    if !verify_slow_cert(keys, n, f, quorum, &m.cert, m.instance) {
        return false;
    }
    for r in &m.cert.replies {
        if r.core.client != m.client {
            return false;
        }
    }
    let (deps, seq) = combine(m.cert.replies.iter());
    deps == m.deps && seq == m.seq
}

/// A proof of misbehavior is valid when both replies verify and their
/// embedded order cores are signed by the same command-leader over the same
/// request digest but name different instances.
pub fn verify_pom(keys: &KeyTable, n: usize, m: &PomMsg) -> bool {
    if m.first.so_core.owner != m.owner || m.second.so_core.owner != m.owner {
        return false;
    }
    if m.first.so_core.req_digest != m.second.so_core.req_digest {
        return false;
    }
    if m.first.so_core.instance == m.second.so_core.instance {
        return false;
    }
    verify_spec_reply(keys, n, &m.first) && verify_spec_reply(keys, n, &m.second)
}

/// Validate commit evidence carried in owner-change views.
pub fn verify_evidence(
    keys: &KeyTable,
    n: usize,
    f: usize,
    quorum: &BTreeSet<u32>,
    instance: InstanceId,
    ev: &CommitEvidence,
) -> Option<(DepSet, SeqNo)> {
    match ev {
        CommitEvidence::Fast(cc) => verify_fast_cert(keys, n, cc, instance),
        CommitEvidence::Slow(c) => {
            if c.instance != instance || !verify_commit(keys, n, f, quorum, c) {
                return None;
            }
            Some((c.deps.clone(), c.seq))
        }
    }
}
