//! Builders for signed protocol fixtures. Test support: lets unit and
//! integration tests assemble valid (and deliberately invalid) messages and
//! certificates without a running network.

use crate::actions::ProtocolConfig;
use crate::crypto::{keygen, sign, KeyPair, NodeId, Signature};
use crate::kv::{Command, Op, Reply};
use crate::types::{
    self, CertKind, CommitCertificate, CommitMsg, DepSet, InstanceId, OwnerNumber,
    ProtocolMessage, RequestMsg, SeqNo, SpecOrderCore, SpecOrderMsg, SpecReplyCore, SpecReplyMsg,
};

/// A deployment's static cryptographic context.
pub struct TestNet {
    pub cfg: ProtocolConfig,
    pub key_seed: [u8; 32],
}

impl TestNet {
    pub fn new(f: usize, clients: usize) -> Self {
        let n = 3 * f + 1;
        let key_seed = [7u8; 32];
        let keys = crate::sim::build_key_table(n, clients, &key_seed);
        let cfg = ProtocolConfig {
            n,
            f,
            keys,
            slow_quorums: ProtocolConfig::default_quorums(n, f),
            slow_timer_us: 200_000,
            retransmit_timer_us: 600_000,
            resend_wait_us: 600_000,
            buffer_timeout_us: 600_000,
            buffer_cap: 1024,
            checkpoint_interval: 128,
            owner_change_quorum: 2 * f + 1,
            rehome_after: 2,
            backoff_cap: 4,
            partial_rollback: true,
        };
        TestNet { cfg, key_seed }
    }

    pub fn replica_key(&self, r: u32) -> KeyPair {
        keygen(&self.key_seed, NodeId::Replica(r))
    }

    pub fn client_key(&self, c: u32) -> KeyPair {
        keygen(&self.key_seed, NodeId::Client(c))
    }

    pub fn request(&self, client: u32, t: u64, key: &str, op: Op) -> RequestMsg {
        let cmd = Command { client: NodeId::Client(client), t, key: key.as_bytes().to_vec(), op };
        let mut req = RequestMsg { command: cmd, original_recipient: None, sig: Signature::zero() };
        req.sig = sign(
            &self.client_key(client),
            &types::signing_bytes(&ProtocolMessage::Request(req.clone())),
        );
        req
    }

    /// An order signed by the leader that `owner` maps to. The space digest
    /// is caller-provided so chains can be built or broken at will.
    pub fn spec_order(
        &self,
        owner: OwnerNumber,
        slot: u64,
        deps: DepSet,
        seq: SeqNo,
        space_digest: crate::crypto::Digest,
        request: &RequestMsg,
    ) -> SpecOrderMsg {
        let leader = owner.owner_index(self.cfg.n);
        let core = SpecOrderCore {
            owner,
            instance: InstanceId::new(leader, slot),
            deps,
            seq,
            space_digest,
            req_digest: types::request_digest(request),
        };
        let sig = sign(&self.replica_key(leader), &types::so_signing_bytes(&core));
        SpecOrderMsg { core, sig, request: request.clone() }
    }

    /// A reply from `sender` echoing the given order with possibly updated
    /// metadata.
    pub fn spec_reply(
        &self,
        sender: u32,
        so: &SpecOrderMsg,
        deps: DepSet,
        seq: SeqNo,
        rep: Reply,
    ) -> SpecReplyMsg {
        let core = SpecReplyCore {
            owner: so.core.owner,
            instance: so.core.instance,
            deps,
            seq,
            req_digest: so.core.req_digest,
            client: so.request.command.client,
            t: so.request.command.t,
        };
        let sig = sign(&self.replica_key(sender), &types::sr_signing_bytes(&core));
        SpecReplyMsg { core, sig, sender, rep, so_core: so.core.clone(), so_sig: so.sig }
    }

    /// Matching replies from every replica: a valid fast certificate.
    pub fn fast_cert(&self, so: &SpecOrderMsg, rep: Reply) -> CommitCertificate {
        let replies = (0..self.cfg.n as u32)
            .map(|r| self.spec_reply(r, so, so.core.deps.clone(), so.core.seq, rep.clone()))
            .collect();
        CommitCertificate { kind: CertKind::Fast, replies }
    }

    /// A slow certificate over the given per-sender metadata, from the
    /// leader's designated quorum.
    pub fn slow_cert(
        &self,
        so: &SpecOrderMsg,
        views: &[(u32, DepSet, SeqNo)],
        rep: Reply,
    ) -> CommitCertificate {
        let replies = views
            .iter()
            .map(|(sender, deps, seq)| self.spec_reply(*sender, so, deps.clone(), *seq, rep.clone()))
            .collect();
        CommitCertificate { kind: CertKind::Slow, replies }
    }

    /// A client-signed commit built from a slow certificate by combining.
    pub fn commit_msg(&self, client: u32, so: &SpecOrderMsg, cert: CommitCertificate) -> CommitMsg {
        let (deps, seq) = crate::cert::combine(cert.replies.iter());
        let mut m = CommitMsg {
            client: NodeId::Client(client),
            instance: so.core.instance,
            deps,
            seq,
            cert,
            sig: Signature::zero(),
        };
        m.sig = sign(
            &self.client_key(client),
            &types::signing_bytes(&ProtocolMessage::Commit(m.clone())),
        );
        m
    }

    pub fn genesis(&self, space: u32) -> crate::crypto::Digest {
        crate::replica::space_genesis(space)
    }
}
