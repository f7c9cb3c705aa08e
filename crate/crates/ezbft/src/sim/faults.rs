//! Fault injection. Byzantine behaviors are wrappers over a correct replica,
//! never freeform: each attack is a named strategy whose effect on the
//! host's traffic is reviewable in one place.

use crate::actions::SimTime;
use crate::crypto::{sign, KeyPair, NodeId};
use crate::replica::Replica;
use crate::types::{
    self, ProtocolMessage, RequestMsg, SpecOrderCore, SpecOrderMsg,
};
use std::collections::BTreeSet;

/// Scripted behavior for one replica.
#[derive(Debug, Clone, PartialEq)]
pub enum FaultBehavior {
    /// Stops processing and sending at the given time.
    Crash { at_us: SimTime },
    /// Drops all outbound traffic inside the window.
    Mute { from_us: SimTime, to_us: SimTime },
    /// Orders the same two requests differently for two replica subsets.
    EquivocateInstance,
    /// Reports an empty dependency set and sequence number one in every
    /// reply, whatever the local log says.
    LieDeps,
    /// Adds a fixed extra delay to all outbound messages.
    Delay { extra_us: SimTime },
    /// Drops each outbound message independently with this probability.
    Drop { probability: f64 },
}

impl FaultBehavior {
    pub fn is_byzantine_or_crash(&self) -> bool {
        matches!(
            self,
            FaultBehavior::Crash { .. }
                | FaultBehavior::Mute { .. }
                | FaultBehavior::EquivocateInstance
                | FaultBehavior::LieDeps
        )
    }
}

/// A message-level partition between two replica groups.
#[derive(Debug, Clone)]
pub struct Partition {
    pub from_us: SimTime,
    pub to_us: SimTime,
    pub group_a: BTreeSet<u32>,
}

/// What the wrapper decided to do with one outbound message.
pub enum Outbound {
    Pass { to: NodeId, msg: ProtocolMessage },
    PassDelayed { to: NodeId, msg: ProtocolMessage, extra_us: SimTime },
    Suppressed { to: NodeId, msg: ProtocolMessage, reason: &'static str },
}

/// A replica plus its scripted fault, if any. The host state machine is
/// always the correct implementation; the wrapper only intercepts traffic.
pub struct ReplicaHost {
    pub replica: Replica,
    key: KeyPair,
    behavior: Option<FaultBehavior>,
    /// Equivocation: a request held back until a second one arrives.
    held: Option<RequestMsg>,
    equivocated: bool,
    split_done: bool,
}

impl ReplicaHost {
    pub fn new(replica: Replica, key: KeyPair, behavior: Option<FaultBehavior>) -> Self {
        ReplicaHost { replica, key, behavior, held: None, equivocated: false, split_done: false }
    }

    pub fn behavior(&self) -> Option<&FaultBehavior> {
        self.behavior.as_ref()
    }

    pub fn is_correct(&self) -> bool {
        self.behavior.is_none()
    }

    pub fn crashed_at(&self, now: SimTime) -> bool {
        matches!(self.behavior, Some(FaultBehavior::Crash { at_us }) if now >= at_us)
    }

    fn muted_at(&self, now: SimTime) -> bool {
        matches!(self.behavior, Some(FaultBehavior::Mute { from_us, to_us }) if now >= from_us && now < to_us)
    }

    /// Decide what happens to one outbound (to, msg) pair at time `now`.
    /// `drop_draw` supplies a seeded uniform sample for the drop behavior.
    pub fn filter_outbound(
        &self,
        now: SimTime,
        to: NodeId,
        msg: ProtocolMessage,
        drop_draw: f64,
    ) -> Outbound {
        if self.crashed_at(now) {
            return Outbound::Suppressed { to, msg, reason: "crashed" };
        }
        if self.muted_at(now) {
            return Outbound::Suppressed { to, msg, reason: "muted" };
        }
        match &self.behavior {
            Some(FaultBehavior::Delay { extra_us }) => {
                Outbound::PassDelayed { to, msg, extra_us: *extra_us }
            }
            Some(FaultBehavior::Drop { probability }) if drop_draw < *probability => {
                Outbound::Suppressed { to, msg, reason: "fault-drop" }
            }
            Some(FaultBehavior::LieDeps) => Outbound::Pass { to, msg: self.lie_about(msg) },
            _ => Outbound::Pass { to, msg },
        }
    }

    fn lie_about(&self, msg: ProtocolMessage) -> ProtocolMessage {
        match msg {
            ProtocolMessage::SpecReply(mut m) => {
                m.core.deps.clear();
                m.core.seq = types::SeqNo(1);
                m.sig = sign(&self.key, &types::sr_signing_bytes(&m.core));
                ProtocolMessage::SpecReply(m)
            }
            other => other,
        }
    }

    /// Equivocation intercepts inbound plain requests: the first is held,
    /// and once a second arrives the host orders them in one order while a
    /// fabricated branch with the opposite order goes to a disjoint subset.
    /// Returns the messages to feed to the host, or None when the original
    /// message was consumed.
    pub fn intercept_inbound(&mut self, msg: &ProtocolMessage) -> Option<Vec<ProtocolMessage>> {
        if !matches!(self.behavior, Some(FaultBehavior::EquivocateInstance)) || self.equivocated {
            return None;
        }
        let ProtocolMessage::Request(req) = msg else { return None };
        if req.original_recipient.is_some() {
            return None;
        }
        match self.held.take() {
            None => {
                self.held = Some(req.clone());
                Some(Vec::new())
            }
            Some(first) => {
                self.equivocated = true;
                // Feed the later request first: the host's genuine branch
                // orders (second, first).
                Some(vec![
                    ProtocolMessage::Request(req.clone()),
                    ProtocolMessage::Request(first),
                ])
            }
        }
    }

    /// After the host handled the swapped pair, rewrite its SpecOrder
    /// broadcast so one subset sees the genuine branch and the other a
    /// fabricated branch with the two slots exchanged.
    pub fn split_spec_orders(
        &mut self,
        outputs: Vec<(NodeId, ProtocolMessage)>,
    ) -> Vec<(NodeId, ProtocolMessage)> {
        if !self.equivocated || self.split_done {
            return outputs;
        }
        // Collect the two genuine orders for this replica's own space.
        let mut orders: Vec<SpecOrderMsg> = outputs
            .iter()
            .filter_map(|(_, m)| match m {
                ProtocolMessage::SpecOrder(so) if so.core.instance.space == self.replica.id => {
                    Some(so.clone())
                }
                _ => None,
            })
            .collect();
        orders.sort_by_key(|so| so.core.instance.slot);
        orders.dedup_by_key(|so| so.core.instance.slot);
        if orders.len() != 2 {
            return outputs;
        }
        self.split_done = true;
        let branch_b = self.fabricate_swapped(&orders[0], &orders[1]);

        let n = self.replica_count(&outputs);
        let subset_a: BTreeSet<u32> = (0..n)
            .filter(|r| *r != self.replica.id)
            .take(1)
            .collect();

        outputs
            .into_iter()
            .map(|(to, m)| match (&to, &m) {
                (NodeId::Replica(r), ProtocolMessage::SpecOrder(so))
                    if so.core.instance.space == self.replica.id && !subset_a.contains(r) =>
                {
                    let swapped = branch_b
                        .iter()
                        .find(|b| b.core.instance.slot == so.core.instance.slot)
                        .cloned()
                        .expect("both slots fabricated");
                    (to, ProtocolMessage::SpecOrder(swapped))
                }
                _ => (to, m),
            })
            .collect()
    }

    fn replica_count(&self, outputs: &[(NodeId, ProtocolMessage)]) -> u32 {
        outputs
            .iter()
            .filter_map(|(to, _)| match to {
                NodeId::Replica(r) => Some(*r + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
            .max(self.replica.id + 1)
    }

    /// Build the opposite-order branch: the same two slots carry the two
    /// requests exchanged, with a consistent digest chain, signed with this
    /// replica's own key.
    fn fabricate_swapped(&self, lo: &SpecOrderMsg, hi: &SpecOrderMsg) -> Vec<SpecOrderMsg> {
        let core_lo = SpecOrderCore {
            owner: lo.core.owner,
            instance: lo.core.instance,
            deps: lo.core.deps.clone(),
            seq: lo.core.seq,
            space_digest: lo.core.space_digest,
            req_digest: types::request_digest(&hi.request),
        };
        let sig_lo = sign(&self.key, &types::so_signing_bytes(&core_lo));
        let so_lo = SpecOrderMsg { core: core_lo, sig: sig_lo, request: hi.request.clone() };

        let encoded_lo = types::encode(&ProtocolMessage::SpecOrder(so_lo.clone()));
        let chain_hi =
            crate::crypto::digest_parts(&[&so_lo.core.space_digest.0, &encoded_lo]);
        let core_hi = SpecOrderCore {
            owner: hi.core.owner,
            instance: hi.core.instance,
            deps: hi.core.deps.clone(),
            seq: hi.core.seq,
            space_digest: chain_hi,
            req_digest: types::request_digest(&lo.request),
        };
        let sig_hi = sign(&self.key, &types::so_signing_bytes(&core_hi));
        let so_hi = SpecOrderMsg { core: core_hi, sig: sig_hi, request: lo.request.clone() };
        vec![so_lo, so_hi]
    }
}
