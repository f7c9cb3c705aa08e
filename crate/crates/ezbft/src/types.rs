//! Protocol identifiers, messages, certificates, and the canonical byte
//! encoding used for signing and digesting.
//!
//! The encoding is deterministic and injective: one tag byte per message
//! kind, fixed-width big-endian integers, length-prefixed variable fields,
//! and set fields sorted in instance order. Signatures are computed over the
//! encoding of the message with its own signature field zeroed.

use crate::crypto::{Digest, NodeId, Signature};
use crate::kv::{Command, Op, Reply, Value};
use std::collections::BTreeSet;
use thiserror::Error;

/// Global name of one consensus slot: an instance space (the owning
/// replica's index) and a slot within it. Ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub struct InstanceId {
    pub space: u32,
    pub slot: u64,
}

impl InstanceId {
    pub fn new(space: u32, slot: u64) -> Self {
        Self { space, slot }
    }
}

impl std::fmt::Display for InstanceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "R{}:{}", self.space, self.slot)
    }
}

/// Per-space epoch counter; `value mod N` identifies the space's current
/// owner. Monotonically non-decreasing for each space.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub struct OwnerNumber(pub u64);

impl OwnerNumber {
    pub fn owner_index(&self, n: usize) -> u32 {
        (self.0 % n as u64) as u32
    }

    pub fn next(&self) -> OwnerNumber {
        OwnerNumber(self.0 + 1)
    }
}

/// Cycle-breaking sequence number; always at least one and strictly greater
/// than the sequence number of every dependency at assignment time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub struct SeqNo(pub u64);

/// Set of interfering instances an instance depends on.
pub type DepSet = BTreeSet<InstanceId>;

/// Client request. The retransmission form names the original recipient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestMsg {
    pub command: Command,
    pub original_recipient: Option<u32>,
    pub sig: Signature,
}

impl RequestMsg {
    pub fn client(&self) -> NodeId {
        self.command.client
    }

    pub fn t(&self) -> u64 {
        self.command.t
    }
}

/// The signed core of a speculative-order message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecOrderCore {
    pub owner: OwnerNumber,
    pub instance: InstanceId,
    pub deps: DepSet,
    pub seq: SeqNo,
    /// Chained digest of the leader's instance space before this slot.
    pub space_digest: Digest,
    /// Digest of the embedded request's encoding.
    pub req_digest: Digest,
}

/// Proposal relayed by a command-leader: the signed core plus the original
/// client request it orders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecOrderMsg {
    pub core: SpecOrderCore,
    pub sig: Signature,
    pub request: RequestMsg,
}

impl SpecOrderMsg {
    pub fn leader(&self, n: usize) -> u32 {
        self.core.owner.owner_index(n)
    }
}

/// The signed core of a speculative reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecReplyCore {
    pub owner: OwnerNumber,
    pub instance: InstanceId,
    pub deps: DepSet,
    pub seq: SeqNo,
    pub req_digest: Digest,
    pub client: NodeId,
    pub t: u64,
}

/// Reply from a replica to the client: the signed core, the sending replica,
/// the speculative result, and the leader-signed order core it responds to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecReplyMsg {
    pub core: SpecReplyCore,
    pub sig: Signature,
    pub sender: u32,
    pub rep: Reply,
    pub so_core: SpecOrderCore,
    pub so_sig: Signature,
}

/// Which quorum rule a commit certificate satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum CertKind {
    /// All 3f+1 replies match on (owner, instance, deps, seq, client, t, rep).
    Fast,
    /// 2f+1 replies from the command-leader's designated slow quorum.
    Slow,
}

/// A set of speculative replies proving an order is safe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitCertificate {
    pub kind: CertKind,
    pub replies: Vec<SpecReplyMsg>,
}

/// Commit evidence a replica can present during an owner change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitEvidence {
    /// Certificate from a fast-path commit.
    Fast(CommitCertificate),
    /// The full client-signed commit message from the slow path.
    Slow(CommitMsg),
}

impl CommitEvidence {
    pub fn owner(&self) -> OwnerNumber {
        match self {
            CommitEvidence::Fast(cc) => cc.replies.first().map(|r| r.core.owner).unwrap_or(OwnerNumber(0)),
            CommitEvidence::Slow(c) => {
                c.cert.replies.first().map(|r| r.core.owner).unwrap_or(OwnerNumber(0))
            }
        }
    }
}

/// Asynchronous fast-path commit notification (carries no outer signature;
/// its authority is the embedded certificate).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitFastMsg {
    pub client: NodeId,
    pub instance: InstanceId,
    pub cert: CommitCertificate,
}

/// Client-signed slow-path commit carrying the combined metadata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitMsg {
    pub client: NodeId,
    pub instance: InstanceId,
    pub deps: DepSet,
    pub seq: SeqNo,
    pub cert: CommitCertificate,
    pub sig: Signature,
}

/// Final-execution result returned on the slow path (unsigned; the client
/// waits for 2f+1 identical replies).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitReplyMsg {
    pub client: NodeId,
    pub t: u64,
    pub instance: InstanceId,
    pub rep: Reply,
    pub sender: u32,
}

/// Relay of a retransmitted request to its original recipient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResendReqMsg {
    pub request: RequestMsg,
    pub forwarder: u32,
}

/// Proof of misbehavior: two verified replies whose embedded order cores are
/// signed by the same command-leader over the same request digest but name
/// different instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PomMsg {
    pub owner: OwnerNumber,
    pub first: SpecReplyMsg,
    pub second: SpecReplyMsg,
}

/// Vote to start an ownership change for a suspect replica's space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StartOwnerChangeMsg {
    pub space: u32,
    pub owner: OwnerNumber,
}

/// One slot of a replica's view of a space, with the evidence it holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerChangeEntry {
    pub slot: u64,
    pub spec_order: SpecOrderMsg,
    pub commit: Option<CommitEvidence>,
}

/// A replica's signed view of the suspect's space since its last checkpoint,
/// sent to the prospective new owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnerChangeMsg {
    pub space: u32,
    pub new_owner: OwnerNumber,
    pub checkpoint: u64,
    pub entries: Vec<OwnerChangeEntry>,
    pub sender: u32,
    pub sig: Signature,
}

/// New owner's announcement: the proof set it collected and the safe
/// instance sequence derived from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewOwnerMsg {
    pub space: u32,
    pub new_owner: OwnerNumber,
    pub proof: Vec<OwnerChangeMsg>,
    pub safe: Vec<OwnerChangeEntry>,
    pub sender: u32,
    pub sig: Signature,
}

/// Every message the protocol exchanges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMessage {
    Request(RequestMsg),
    SpecOrder(SpecOrderMsg),
    SpecReply(SpecReplyMsg),
    CommitFast(CommitFastMsg),
    Commit(CommitMsg),
    CommitReply(CommitReplyMsg),
    ResendReq(ResendReqMsg),
    Pom(PomMsg),
    StartOwnerChange(StartOwnerChangeMsg),
    OwnerChange(OwnerChangeMsg),
    NewOwner(NewOwnerMsg),
}

impl ProtocolMessage {
    pub fn kind_str(&self) -> &'static str {
        match self {
            ProtocolMessage::Request(_) => "Request",
            ProtocolMessage::SpecOrder(_) => "SpecOrder",
            ProtocolMessage::SpecReply(_) => "SpecReply",
            ProtocolMessage::CommitFast(_) => "CommitFast",
            ProtocolMessage::Commit(_) => "Commit",
            ProtocolMessage::CommitReply(_) => "CommitReply",
            ProtocolMessage::ResendReq(_) => "ResendReq",
            ProtocolMessage::Pom(_) => "Pom",
            ProtocolMessage::StartOwnerChange(_) => "StartOwnerChange",
            ProtocolMessage::OwnerChange(_) => "OwnerChange",
            ProtocolMessage::NewOwner(_) => "NewOwner",
        }
    }

    /// Instance the message is about, when it names one.
    pub fn instance(&self) -> Option<InstanceId> {
        match self {
            ProtocolMessage::SpecOrder(m) => Some(m.core.instance),
            ProtocolMessage::SpecReply(m) => Some(m.core.instance),
            ProtocolMessage::CommitFast(m) => Some(m.instance),
            ProtocolMessage::Commit(m) => Some(m.instance),
            ProtocolMessage::CommitReply(m) => Some(m.instance),
            _ => None,
        }
    }
}

/// True when two replies match for the fast-path rule: identical owner,
/// instance, deps, seq, client, timestamp, and result. Sender and the
/// embedded order are excluded.
pub fn match_spec_replies(a: &SpecReplyMsg, b: &SpecReplyMsg) -> bool {
    a.core.owner == b.core.owner
        && a.core.instance == b.core.instance
        && a.core.deps == b.core.deps
        && a.core.seq == b.core.seq
        && a.core.client == b.core.client
        && a.core.t == b.core.t
        && a.rep == b.rep
}

// ---------------------------------------------------------------------------
// Canonical encoding
// ---------------------------------------------------------------------------

const TAG_REQUEST: u8 = 1;
const TAG_SPEC_ORDER: u8 = 2;
const TAG_SPEC_REPLY: u8 = 3;
const TAG_COMMIT_FAST: u8 = 4;
const TAG_COMMIT: u8 = 5;
const TAG_COMMIT_REPLY: u8 = 6;
const TAG_RESEND_REQ: u8 = 7;
const TAG_POM: u8 = 8;
const TAG_START_OWNER_CHANGE: u8 = 9;
const TAG_OWNER_CHANGE: u8 = 10;
const TAG_NEW_OWNER: u8 = 11;

struct Enc {
    out: Vec<u8>,
}

impl Enc {
    fn new() -> Self {
        Enc { out: Vec::with_capacity(256) }
    }

    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }

    fn i64(&mut self, v: i64) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.out.extend_from_slice(v);
    }

    fn raw32(&mut self, v: &[u8; 32]) {
        self.out.extend_from_slice(v);
    }

    fn node(&mut self, id: NodeId) {
        id.encode_to(&mut self.out);
    }

    fn instance(&mut self, i: InstanceId) {
        self.u32(i.space);
        self.u64(i.slot);
    }

    fn deps(&mut self, d: &DepSet) {
        self.u32(d.len() as u32);
        for i in d {
            self.instance(*i);
        }
    }

    fn value(&mut self, v: &Value) {
        match v {
            Value::Bytes(b) => {
                self.u8(0);
                self.bytes(b);
            }
            Value::Int(n) => {
                self.u8(1);
                self.i64(*n);
            }
        }
    }

    fn command(&mut self, c: &Command) {
        self.node(c.client);
        self.u64(c.t);
        self.bytes(&c.key);
        match &c.op {
            Op::Get => self.u8(0),
            Op::Put(v) => {
                self.u8(1);
                self.value(v);
            }
            Op::Inc(d) => {
                self.u8(2);
                self.i64(*d);
            }
        }
    }

    fn reply(&mut self, r: &Reply) {
        match r {
            Reply::Ack => self.u8(0),
            Reply::Value(v) => {
                self.u8(1);
                self.value(v);
            }
            Reply::Empty => self.u8(2),
        }
    }

    fn opt_u32(&mut self, v: Option<u32>) {
        match v {
            None => self.u8(0),
            Some(x) => {
                self.u8(1);
                self.u32(x);
            }
        }
    }

    fn request(&mut self, m: &RequestMsg, zero_sig: bool) {
        self.u8(TAG_REQUEST);
        self.command(&m.command);
        self.opt_u32(m.original_recipient);
        self.raw32(if zero_sig { &[0u8; 32] } else { &m.sig.0 });
    }

    fn so_core(&mut self, c: &SpecOrderCore) {
        self.u64(c.owner.0);
        self.instance(c.instance);
        self.deps(&c.deps);
        self.u64(c.seq.0);
        self.raw32(&c.space_digest.0);
        self.raw32(&c.req_digest.0);
    }

    fn spec_order(&mut self, m: &SpecOrderMsg) {
        self.u8(TAG_SPEC_ORDER);
        self.so_core(&m.core);
        self.raw32(&m.sig.0);
        self.request(&m.request, false);
    }

    fn sr_core(&mut self, c: &SpecReplyCore) {
        self.u64(c.owner.0);
        self.instance(c.instance);
        self.deps(&c.deps);
        self.u64(c.seq.0);
        self.raw32(&c.req_digest.0);
        self.node(c.client);
        self.u64(c.t);
    }

    fn spec_reply(&mut self, m: &SpecReplyMsg) {
        self.u8(TAG_SPEC_REPLY);
        self.sr_core(&m.core);
        self.raw32(&m.sig.0);
        self.u32(m.sender);
        self.reply(&m.rep);
        self.so_core(&m.so_core);
        self.raw32(&m.so_sig.0);
    }

    fn cert(&mut self, c: &CommitCertificate) {
        self.u8(match c.kind {
            CertKind::Fast => 0,
            CertKind::Slow => 1,
        });
        self.u32(c.replies.len() as u32);
        for r in &c.replies {
            self.spec_reply(r);
        }
    }

    fn commit(&mut self, m: &CommitMsg, zero_sig: bool) {
        self.u8(TAG_COMMIT);
        self.node(m.client);
        self.instance(m.instance);
        self.deps(&m.deps);
        self.u64(m.seq.0);
        self.cert(&m.cert);
        self.raw32(if zero_sig { &[0u8; 32] } else { &m.sig.0 });
    }

    fn evidence(&mut self, e: &CommitEvidence) {
        match e {
            CommitEvidence::Fast(cc) => {
                self.u8(0);
                self.cert(cc);
            }
            CommitEvidence::Slow(c) => {
                self.u8(1);
                self.commit(c, false);
            }
        }
    }

    fn oc_entry(&mut self, e: &OwnerChangeEntry) {
        self.u64(e.slot);
        self.spec_order(&e.spec_order);
        match &e.commit {
            None => self.u8(0),
            Some(ev) => {
                self.u8(1);
                self.evidence(ev);
            }
        }
    }

    fn owner_change(&mut self, m: &OwnerChangeMsg, zero_sig: bool) {
        self.u8(TAG_OWNER_CHANGE);
        self.u32(m.space);
        self.u64(m.new_owner.0);
        self.u64(m.checkpoint);
        self.u32(m.entries.len() as u32);
        for e in &m.entries {
            self.oc_entry(e);
        }
        self.u32(m.sender);
        self.raw32(if zero_sig { &[0u8; 32] } else { &m.sig.0 });
    }

    fn message(&mut self, m: &ProtocolMessage, zero_outer_sig: bool) {
        match m {
            ProtocolMessage::Request(r) => self.request(r, zero_outer_sig),
            ProtocolMessage::SpecOrder(so) => {
                self.u8(TAG_SPEC_ORDER);
                self.so_core(&so.core);
                self.raw32(if zero_outer_sig { &[0u8; 32] } else { &so.sig.0 });
                self.request(&so.request, false);
            }
            ProtocolMessage::SpecReply(sr) => {
                self.u8(TAG_SPEC_REPLY);
                self.sr_core(&sr.core);
                self.raw32(if zero_outer_sig { &[0u8; 32] } else { &sr.sig.0 });
                self.u32(sr.sender);
                self.reply(&sr.rep);
                self.so_core(&sr.so_core);
                self.raw32(&sr.so_sig.0);
            }
            ProtocolMessage::CommitFast(c) => {
                self.u8(TAG_COMMIT_FAST);
                self.node(c.client);
                self.instance(c.instance);
                self.cert(&c.cert);
            }
            ProtocolMessage::Commit(c) => self.commit(c, zero_outer_sig),
            ProtocolMessage::CommitReply(c) => {
                self.u8(TAG_COMMIT_REPLY);
                self.node(c.client);
                self.u64(c.t);
                self.instance(c.instance);
                self.reply(&c.rep);
                self.u32(c.sender);
            }
            ProtocolMessage::ResendReq(r) => {
                self.u8(TAG_RESEND_REQ);
                self.request(&r.request, false);
                self.u32(r.forwarder);
            }
            ProtocolMessage::Pom(p) => {
                self.u8(TAG_POM);
                self.u64(p.owner.0);
                self.spec_reply(&p.first);
                self.spec_reply(&p.second);
            }
            ProtocolMessage::StartOwnerChange(s) => {
                self.u8(TAG_START_OWNER_CHANGE);
                self.u32(s.space);
                self.u64(s.owner.0);
            }
            ProtocolMessage::OwnerChange(oc) => self.owner_change(oc, zero_outer_sig),
            ProtocolMessage::NewOwner(no) => {
                self.u8(TAG_NEW_OWNER);
                self.u32(no.space);
                self.u64(no.new_owner.0);
                self.u32(no.proof.len() as u32);
                for p in &no.proof {
                    self.owner_change(p, false);
                }
                self.u32(no.safe.len() as u32);
                for e in &no.safe {
                    self.oc_entry(e);
                }
                self.u32(no.sender);
                self.raw32(if zero_outer_sig { &[0u8; 32] } else { &no.sig.0 });
            }
        }
    }
}

/// Canonical encoding of a message, signatures included.
pub fn encode(m: &ProtocolMessage) -> Vec<u8> {
    let mut e = Enc::new();
    e.message(m, false);
    e.out
}

/// Encoding with the message's own (outer) signature field zeroed; this is
/// the byte string signatures are computed over. Embedded signatures are
/// left intact.
pub fn signing_bytes(m: &ProtocolMessage) -> Vec<u8> {
    let mut e = Enc::new();
    e.message(m, true);
    e.out
}

/// The byte string a command-leader signs: the order core alone. The
/// piggybacked request is covered by its own client signature, and the core
/// must stay verifiable when relayed without the request.
pub fn so_signing_bytes(core: &SpecOrderCore) -> Vec<u8> {
    let mut e = Enc::new();
    e.u8(TAG_SPEC_ORDER);
    e.so_core(core);
    e.out
}

/// The byte string a replying replica signs: the reply core alone. Sender
/// identity is bound by which key verifies; the result and embedded order
/// travel outside the signature.
pub fn sr_signing_bytes(core: &SpecReplyCore) -> Vec<u8> {
    let mut e = Enc::new();
    e.u8(TAG_SPEC_REPLY);
    e.sr_core(core);
    e.out
}

/// Digest of a request's canonical encoding; the `d` field carried by
/// orders and replies.
pub fn request_digest(r: &RequestMsg) -> Digest {
    crate::crypto::digest(&encode(&ProtocolMessage::Request(r.clone())))
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Eof(usize),
    #[error("unknown tag {tag} at offset {at}")]
    BadTag { tag: u8, at: usize },
    #[error("trailing bytes after message")]
    Trailing,
    #[error("length field out of bounds")]
    BadLength,
    #[error("non-canonical set ordering")]
    NonCanonical,
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.buf.len() {
            return Err(DecodeError::Eof(self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(DecodeError::BadLength);
        }
        Ok(self.take(n)?.to_vec())
    }

    fn raw32(&mut self) -> Result<[u8; 32], DecodeError> {
        Ok(self.take(32)?.try_into().unwrap())
    }

    fn node(&mut self) -> Result<NodeId, DecodeError> {
        let kind = self.u8()?;
        let idx = self.u32()?;
        match kind {
            0 => Ok(NodeId::Replica(idx)),
            1 => Ok(NodeId::Client(idx)),
            t => Err(DecodeError::BadTag { tag: t, at: self.pos - 5 }),
        }
    }

    fn instance(&mut self) -> Result<InstanceId, DecodeError> {
        Ok(InstanceId { space: self.u32()?, slot: self.u64()? })
    }

    fn deps(&mut self) -> Result<DepSet, DecodeError> {
        let n = self.u32()? as usize;
        let mut d = DepSet::new();
        let mut prev: Option<InstanceId> = None;
        for _ in 0..n {
            let i = self.instance()?;
            // Canonical form: strictly ascending, no duplicates.
            if prev.map(|p| p >= i).unwrap_or(false) {
                return Err(DecodeError::NonCanonical);
            }
            prev = Some(i);
            d.insert(i);
        }
        Ok(d)
    }

    fn value(&mut self) -> Result<Value, DecodeError> {
        match self.u8()? {
            0 => Ok(Value::Bytes(self.bytes()?)),
            1 => Ok(Value::Int(self.i64()?)),
            t => Err(DecodeError::BadTag { tag: t, at: self.pos - 1 }),
        }
    }

    fn command(&mut self) -> Result<Command, DecodeError> {
        let client = self.node()?;
        let t = self.u64()?;
        let key = self.bytes()?;
        let op = match self.u8()? {
            0 => Op::Get,
            1 => Op::Put(self.value()?),
            2 => Op::Inc(self.i64()?),
            tag => return Err(DecodeError::BadTag { tag, at: self.pos - 1 }),
        };
        Ok(Command { client, t, key, op })
    }

    fn reply(&mut self) -> Result<Reply, DecodeError> {
        match self.u8()? {
            0 => Ok(Reply::Ack),
            1 => Ok(Reply::Value(self.value()?)),
            2 => Ok(Reply::Empty),
            t => Err(DecodeError::BadTag { tag: t, at: self.pos - 1 }),
        }
    }

    fn opt_u32(&mut self) -> Result<Option<u32>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.u32()?)),
            t => Err(DecodeError::BadTag { tag: t, at: self.pos - 1 }),
        }
    }

    fn expect_tag(&mut self, want: u8) -> Result<(), DecodeError> {
        let got = self.u8()?;
        if got != want {
            return Err(DecodeError::BadTag { tag: got, at: self.pos - 1 });
        }
        Ok(())
    }

    fn request_body(&mut self) -> Result<RequestMsg, DecodeError> {
        let command = self.command()?;
        let original_recipient = self.opt_u32()?;
        let sig = Signature(self.raw32()?);
        Ok(RequestMsg { command, original_recipient, sig })
    }

    fn request(&mut self) -> Result<RequestMsg, DecodeError> {
        self.expect_tag(TAG_REQUEST)?;
        self.request_body()
    }

    fn so_core(&mut self) -> Result<SpecOrderCore, DecodeError> {
        Ok(SpecOrderCore {
            owner: OwnerNumber(self.u64()?),
            instance: self.instance()?,
            deps: self.deps()?,
            seq: SeqNo(self.u64()?),
            space_digest: Digest(self.raw32()?),
            req_digest: Digest(self.raw32()?),
        })
    }

    fn spec_order(&mut self) -> Result<SpecOrderMsg, DecodeError> {
        self.expect_tag(TAG_SPEC_ORDER)?;
        let core = self.so_core()?;
        let sig = Signature(self.raw32()?);
        let request = self.request()?;
        Ok(SpecOrderMsg { core, sig, request })
    }

    fn sr_core(&mut self) -> Result<SpecReplyCore, DecodeError> {
        Ok(SpecReplyCore {
            owner: OwnerNumber(self.u64()?),
            instance: self.instance()?,
            deps: self.deps()?,
            seq: SeqNo(self.u64()?),
            req_digest: Digest(self.raw32()?),
            client: self.node()?,
            t: self.u64()?,
        })
    }

    fn spec_reply(&mut self) -> Result<SpecReplyMsg, DecodeError> {
        self.expect_tag(TAG_SPEC_REPLY)?;
        let core = self.sr_core()?;
        let sig = Signature(self.raw32()?);
        let sender = self.u32()?;
        let rep = self.reply()?;
        let so_core = self.so_core()?;
        let so_sig = Signature(self.raw32()?);
        Ok(SpecReplyMsg { core, sig, sender, rep, so_core, so_sig })
    }

    fn cert(&mut self) -> Result<CommitCertificate, DecodeError> {
        let kind = match self.u8()? {
            0 => CertKind::Fast,
            1 => CertKind::Slow,
            t => return Err(DecodeError::BadTag { tag: t, at: self.pos - 1 }),
        };
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(DecodeError::BadLength);
        }
        let mut replies = Vec::with_capacity(n);
        for _ in 0..n {
            replies.push(self.spec_reply()?);
        }
        Ok(CommitCertificate { kind, replies })
    }

    fn commit(&mut self) -> Result<CommitMsg, DecodeError> {
        self.expect_tag(TAG_COMMIT)?;
        let client = self.node()?;
        let instance = self.instance()?;
        let deps = self.deps()?;
        let seq = SeqNo(self.u64()?);
        let cert = self.cert()?;
        let sig = Signature(self.raw32()?);
        Ok(CommitMsg { client, instance, deps, seq, cert, sig })
    }

    fn evidence(&mut self) -> Result<CommitEvidence, DecodeError> {
        match self.u8()? {
            0 => Ok(CommitEvidence::Fast(self.cert()?)),
            1 => Ok(CommitEvidence::Slow(self.commit()?)),
            t => Err(DecodeError::BadTag { tag: t, at: self.pos - 1 }),
        }
    }

    fn oc_entry(&mut self) -> Result<OwnerChangeEntry, DecodeError> {
        let slot = self.u64()?;
        let spec_order = self.spec_order()?;
        let commit = match self.u8()? {
            0 => None,
            1 => Some(self.evidence()?),
            t => return Err(DecodeError::BadTag { tag: t, at: self.pos - 1 }),
        };
        Ok(OwnerChangeEntry { slot, spec_order, commit })
    }

    fn owner_change(&mut self) -> Result<OwnerChangeMsg, DecodeError> {
        self.expect_tag(TAG_OWNER_CHANGE)?;
        let space = self.u32()?;
        let new_owner = OwnerNumber(self.u64()?);
        let checkpoint = self.u64()?;
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            return Err(DecodeError::BadLength);
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(self.oc_entry()?);
        }
        let sender = self.u32()?;
        let sig = Signature(self.raw32()?);
        Ok(OwnerChangeMsg { space, new_owner, checkpoint, entries, sender, sig })
    }

    fn message(&mut self) -> Result<ProtocolMessage, DecodeError> {
        let tag = self.buf.get(self.pos).copied().ok_or(DecodeError::Eof(self.pos))?;
        match tag {
            TAG_REQUEST => Ok(ProtocolMessage::Request(self.request()?)),
            TAG_SPEC_ORDER => Ok(ProtocolMessage::SpecOrder(self.spec_order()?)),
            TAG_SPEC_REPLY => Ok(ProtocolMessage::SpecReply(self.spec_reply()?)),
            TAG_COMMIT_FAST => {
                self.expect_tag(TAG_COMMIT_FAST)?;
                let client = self.node()?;
                let instance = self.instance()?;
                let cert = self.cert()?;
                Ok(ProtocolMessage::CommitFast(CommitFastMsg { client, instance, cert }))
            }
            TAG_COMMIT => Ok(ProtocolMessage::Commit(self.commit()?)),
            TAG_COMMIT_REPLY => {
                self.expect_tag(TAG_COMMIT_REPLY)?;
                let client = self.node()?;
                let t = self.u64()?;
                let instance = self.instance()?;
                let rep = self.reply()?;
                let sender = self.u32()?;
                Ok(ProtocolMessage::CommitReply(CommitReplyMsg { client, t, instance, rep, sender }))
            }
            TAG_RESEND_REQ => {
                self.expect_tag(TAG_RESEND_REQ)?;
                let request = self.request()?;
                let forwarder = self.u32()?;
                Ok(ProtocolMessage::ResendReq(ResendReqMsg { request, forwarder }))
            }
            TAG_POM => {
                self.expect_tag(TAG_POM)?;
                let owner = OwnerNumber(self.u64()?);
                let first = self.spec_reply()?;
                let second = self.spec_reply()?;
                Ok(ProtocolMessage::Pom(PomMsg { owner, first, second }))
            }
            TAG_START_OWNER_CHANGE => {
                self.expect_tag(TAG_START_OWNER_CHANGE)?;
                let space = self.u32()?;
                let owner = OwnerNumber(self.u64()?);
                Ok(ProtocolMessage::StartOwnerChange(StartOwnerChangeMsg { space, owner }))
            }
            TAG_OWNER_CHANGE => Ok(ProtocolMessage::OwnerChange(self.owner_change()?)),
            TAG_NEW_OWNER => {
                self.expect_tag(TAG_NEW_OWNER)?;
                let space = self.u32()?;
                let new_owner = OwnerNumber(self.u64()?);
                let np = self.u32()? as usize;
                if np > self.buf.len() {
                    return Err(DecodeError::BadLength);
                }
                let mut proof = Vec::with_capacity(np);
                for _ in 0..np {
                    proof.push(self.owner_change()?);
                }
                let ns = self.u32()? as usize;
                if ns > self.buf.len() {
                    return Err(DecodeError::BadLength);
                }
                let mut safe = Vec::with_capacity(ns);
                for _ in 0..ns {
                    safe.push(self.oc_entry()?);
                }
                let sender = self.u32()?;
                let sig = Signature(self.raw32()?);
                Ok(ProtocolMessage::NewOwner(NewOwnerMsg { space, new_owner, proof, safe, sender, sig }))
            }
            t => Err(DecodeError::BadTag { tag: t, at: self.pos }),
        }
    }
}

/// Decode a canonical message encoding. Rejects trailing bytes.
pub fn decode(buf: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let mut d = Dec::new(buf);
    let m = d.message()?;
    if d.pos != buf.len() {
        return Err(DecodeError::Trailing);
    }
    Ok(m)
}

/// Lifecycle of a command at one replica.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum CommandStatus {
    PreAccepted,
    SpecExecuted,
    CommittedFast,
    CommittedSlow,
    FinallyExecuted,
}

impl CommandStatus {
    pub fn is_committed(&self) -> bool {
        matches!(
            self,
            CommandStatus::CommittedFast | CommandStatus::CommittedSlow | CommandStatus::FinallyExecuted
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv::{Op, Value};
    use crate::testkit::TestNet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net() -> TestNet {
        TestNet::new(1, 3)
    }

    fn sample_messages(net: &TestNet) -> Vec<ProtocolMessage> {
        let req = net.request(0, 1, "key", Op::Put(Value::Int(5)));
        let mut retrans = net.request(1, 2, "key2", Op::Get);
        retrans.original_recipient = Some(2);
        let so = net.spec_order(
            OwnerNumber(0),
            0,
            [InstanceId::new(1, 4)].into_iter().collect(),
            SeqNo(2),
            net.genesis(0),
            &req,
        );
        let sr = net.spec_reply(1, &so, so.core.deps.clone(), so.core.seq, Reply::Ack);
        let fast = net.fast_cert(&so, Reply::Value(Value::Bytes(b"v".to_vec())));
        let slow = net.slow_cert(
            &so,
            &[
                (0, DepSet::new(), SeqNo(1)),
                (1, DepSet::new(), SeqNo(1)),
                (2, [InstanceId::new(3, 0)].into_iter().collect(), SeqNo(2)),
            ],
            Reply::Empty,
        );
        let commit = net.commit_msg(0, &so, slow);
        vec![
            ProtocolMessage::Request(req.clone()),
            ProtocolMessage::Request(retrans),
            ProtocolMessage::SpecOrder(so.clone()),
            ProtocolMessage::SpecReply(sr.clone()),
            ProtocolMessage::CommitFast(CommitFastMsg {
                client: crate::crypto::NodeId::Client(0),
                instance: so.core.instance,
                cert: fast,
            }),
            ProtocolMessage::Commit(commit.clone()),
            ProtocolMessage::CommitReply(CommitReplyMsg {
                client: crate::crypto::NodeId::Client(0),
                t: 1,
                instance: so.core.instance,
                rep: Reply::Ack,
                sender: 2,
            }),
            ProtocolMessage::ResendReq(ResendReqMsg { request: req, forwarder: 3 }),
            ProtocolMessage::Pom(PomMsg {
                owner: OwnerNumber(0),
                first: sr.clone(),
                second: net.spec_reply(2, &so, DepSet::new(), SeqNo(1), Reply::Ack),
            }),
            ProtocolMessage::StartOwnerChange(StartOwnerChangeMsg {
                space: 0,
                owner: OwnerNumber(0),
            }),
            ProtocolMessage::OwnerChange(OwnerChangeMsg {
                space: 0,
                new_owner: OwnerNumber(1),
                checkpoint: 0,
                entries: vec![OwnerChangeEntry {
                    slot: 0,
                    spec_order: so.clone(),
                    commit: Some(CommitEvidence::Slow(commit)),
                }],
                sender: 2,
                sig: Signature::zero(),
            }),
            ProtocolMessage::NewOwner(NewOwnerMsg {
                space: 0,
                new_owner: OwnerNumber(1),
                proof: Vec::new(),
                safe: vec![OwnerChangeEntry { slot: 0, spec_order: so, commit: None }],
                sender: 1,
                sig: Signature::zero(),
            }),
        ]
    }

    #[test]
    fn every_message_kind_round_trips() {
        let netx = net();
        for msg in sample_messages(&netx) {
            let bytes = encode(&msg);
            let back = decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", msg.kind_str()));
            assert_eq!(back, msg, "{}", msg.kind_str());
        }
    }

    #[test]
    fn decode_rejects_trailing_bytes() {
        let netx = net();
        let mut bytes = encode(&sample_messages(&netx)[0]);
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(DecodeError::Trailing));
    }

    #[test]
    fn decode_rejects_truncation() {
        let netx = net();
        let bytes = encode(&sample_messages(&netx)[2]);
        for cut in [1, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err());
        }
    }

    /// Relaying embeds the original request bytes unchanged.
    #[test]
    fn embedded_request_re_encodes_identically() {
        let netx = net();
        let req = netx.request(0, 1, "key", Op::Put(Value::Int(5)));
        let original = encode(&ProtocolMessage::Request(req.clone()));
        let so = netx.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), netx.genesis(0), &req);
        let relayed = encode(&ProtocolMessage::Request(so.request.clone()));
        assert_eq!(original, relayed);
    }

    /// Injectivity over a large randomized corpus: distinct messages never
    /// share an encoding.
    #[test]
    fn encoding_injective_over_large_corpus() {
        let netx = net();
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
        let mut seen: std::collections::BTreeMap<Vec<u8>, ProtocolMessage> =
            std::collections::BTreeMap::new();
        let mut corpus = 0u64;
        while corpus < 100_000 {
            let client: u32 = rng.gen_range(0..3);
            let t: u64 = rng.gen_range(1..1000);
            let key = format!("k{}", rng.gen_range(0..50u32));
            let op = match rng.gen_range(0..3u8) {
                0 => Op::Get,
                1 => Op::Put(Value::Int(rng.gen_range(-100..100))),
                _ => Op::Inc(rng.gen_range(-5..5)),
            };
            let req = netx.request(client, t, &key, op);
            let msg = if rng.gen_bool(0.5) {
                ProtocolMessage::Request(req)
            } else {
                let mut deps = DepSet::new();
                for _ in 0..rng.gen_range(0..4) {
                    deps.insert(InstanceId::new(rng.gen_range(0..4), rng.gen_range(0..64)));
                }
                let so = netx.spec_order(
                    OwnerNumber(rng.gen_range(0..4)),
                    rng.gen_range(0..64),
                    deps,
                    SeqNo(rng.gen_range(1..1000)),
                    crate::crypto::digest(&rng.gen::<[u8; 8]>()),
                    &req,
                );
                ProtocolMessage::SpecOrder(so)
            };
            let bytes = encode(&msg);
            if let Some(prev) = seen.insert(bytes, msg.clone()) {
                assert_eq!(prev, msg, "two distinct messages share an encoding");
            }
            corpus += 1;
        }
        assert!(seen.len() > 90_000, "corpus should be mostly distinct");
    }

    /// The canonical encoding is stable within a build: a fixed sample must
    /// produce this exact byte string.
    #[test]
    fn golden_encoding_is_stable() {
        let req = RequestMsg {
            command: crate::kv::Command {
                client: crate::crypto::NodeId::Client(1),
                t: 7,
                key: b"k".to_vec(),
                op: Op::Put(Value::Int(-2)),
            },
            original_recipient: Some(3),
            sig: Signature([0xab; 32]),
        };
        let bytes = encode(&ProtocolMessage::Request(req));
        let hex: String = bytes.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(
            hex,
            "0101000000010000000000000007000000016b0101fffffffffffffffe0100000003\
abababababababababababababababababababababababababababababababab"
        );
    }

    #[test]
    fn match_rule_uses_exactly_the_seven_fields() {
        let netx = net();
        let req = netx.request(0, 1, "k", Op::Get);
        let so = netx.spec_order(OwnerNumber(0), 0, DepSet::new(), SeqNo(1), netx.genesis(0), &req);
        let base = netx.spec_reply(1, &so, DepSet::new(), SeqNo(1), Reply::Empty);

        let same_from_other = netx.spec_reply(2, &so, DepSet::new(), SeqNo(1), Reply::Empty);
        assert!(match_spec_replies(&base, &same_from_other), "sender is excluded");

        let mut deps = DepSet::new();
        deps.insert(InstanceId::new(2, 0));
        let diff_deps = netx.spec_reply(2, &so, deps, SeqNo(1), Reply::Empty);
        assert!(!match_spec_replies(&base, &diff_deps));

        let diff_rep = netx.spec_reply(2, &so, DepSet::new(), SeqNo(1), Reply::Ack);
        assert!(!match_spec_replies(&base, &diff_rep));

        let diff_seq = netx.spec_reply(2, &so, DepSet::new(), SeqNo(3), Reply::Empty);
        assert!(!match_spec_replies(&base, &diff_seq));
    }
}

#[cfg(test)]
mod canonical_tests {
    use super::*;
    use crate::kv::Op;
    use crate::testkit::TestNet;

    /// Bytes with an unsorted dependency set are not a valid encoding: only
    /// the canonical byte string for a message decodes.
    #[test]
    fn decode_rejects_unsorted_sets() {
        let net = TestNet::new(1, 1);
        let req = net.request(0, 1, "k", Op::Get);
        let deps: DepSet =
            [InstanceId::new(1, 0), InstanceId::new(2, 0)].into_iter().collect();
        let so = net.spec_order(OwnerNumber(0), 0, deps, SeqNo(2), net.genesis(0), &req);
        let bytes = encode(&ProtocolMessage::SpecOrder(so));

        // The two 12-byte instance entries start after tag + owner + instance
        // + count; swapping them breaks canonical order.
        let deps_start = 1 + 8 + 12 + 4;
        let mut swapped = bytes.clone();
        swapped[deps_start..deps_start + 24].rotate_left(12);
        assert_eq!(decode(&swapped), Err(DecodeError::NonCanonical));
        assert!(decode(&bytes).is_ok());
    }
}
