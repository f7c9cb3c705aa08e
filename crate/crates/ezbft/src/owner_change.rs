//! Safe-history selection for ownership changes.
//!
//! When a space's owner is suspected, every replica that committed to the
//! change sends its view of that space to the prospective new owner. The new
//! owner derives the sequence of safe instances from those views, and every
//! replica that receives the announcement re-derives it from the same proof
//! set; the function here must therefore be a deterministic pure function of
//! the proof set and static configuration.

use crate::actions::ProtocolConfig;
use crate::cert;
use crate::crypto::Signature;
use crate::types::{CommitEvidence, OwnerChangeEntry, OwnerChangeMsg, OwnerNumber};
use std::collections::BTreeMap;

/// One sanitized view: the contiguous, fully verified prefix of a sender's
/// reported entries.
struct View<'a> {
    sender: u32,
    entries: Vec<&'a OwnerChangeEntry>,
}

fn evidence_valid(
    cfg: &ProtocolConfig,
    entry: &OwnerChangeEntry,
    ev: &CommitEvidence,
) -> Option<(crate::types::DepSet, crate::types::SeqNo)> {
    let leader = ev.owner().owner_index(cfg.n);
    let quorum = cfg.slow_quorums.get(&leader)?;
    cert::verify_evidence(
        &cfg.keys,
        cfg.n,
        cfg.f,
        quorum,
        entry.spec_order.core.instance,
        ev,
    )
}

/// Verify and truncate one reported view to its valid contiguous prefix
/// starting at `base`.
fn sanitize<'a>(cfg: &ProtocolConfig, space: u32, base: u64, m: &'a OwnerChangeMsg) -> Vec<&'a OwnerChangeEntry> {
    let mut out = Vec::new();
    let mut expect = base;
    for e in &m.entries {
        if e.slot < base {
            continue;
        }
        if e.slot != expect {
            break;
        }
        let inst = e.spec_order.core.instance;
        if inst.space != space || inst.slot != e.slot {
            break;
        }
        if !cert::verify_spec_order(&cfg.keys, cfg.n, &e.spec_order) {
            break;
        }
        if let Some(ev) = &e.commit {
            if evidence_valid(cfg, e, ev).is_none() {
                break;
            }
        }
        out.push(e);
        expect += 1;
    }
    out
}

/// Identity of a reported order: the leader signature over its core, which
/// pins every signed field.
fn so_identity(e: &OwnerChangeEntry) -> Signature {
    e.spec_order.sig
}

/// Derive the safe instance sequence from a set of verified owner-change
/// views.
///
/// The longest reported sequence provable entirely by commit evidence or
/// entirely by f+1 matching orders (at the highest owner number present) is
/// the base; a longer sequence extending it entry-for-entry is accepted when
/// each extra entry is provable by the complementary kind of evidence. Ties
/// break toward the lowest proposing replica. Every chosen entry is then
/// annotated with the best commit evidence found anywhere in the proof set.
pub fn select_history(
    cfg: &ProtocolConfig,
    space: u32,
    proof: &BTreeMap<u32, OwnerChangeMsg>,
) -> Vec<OwnerChangeEntry> {
    let base_slot = proof.values().map(|m| m.checkpoint).max().unwrap_or(0);
    let views: Vec<View<'_>> = proof
        .iter()
        .map(|(sender, m)| View { sender: *sender, entries: sanitize(cfg, space, base_slot, m) })
        .collect();

    // Highest owner number appearing in any verified order or evidence.
    let highest = views
        .iter()
        .flat_map(|v| v.entries.iter())
        .flat_map(|e| {
            std::iter::once(e.spec_order.core.owner)
                .chain(e.commit.as_ref().map(|ev| ev.owner()))
        })
        .max()
        .unwrap_or(OwnerNumber(0));

    // Pooled attestation counts per (slot, order identity), and the best
    // pooled commit evidence per slot: highest evidence owner, then lowest
    // provider index.
    let mut support: BTreeMap<(u64, Signature), std::collections::BTreeSet<u32>> = BTreeMap::new();
    let mut pooled_commit: BTreeMap<u64, (OwnerNumber, u32, &OwnerChangeEntry)> = BTreeMap::new();
    for v in &views {
        for e in &v.entries {
            if e.spec_order.core.owner == highest {
                support.entry((e.slot, so_identity(e))).or_default().insert(v.sender);
            }
            if let Some(ev) = &e.commit {
                let owner = ev.owner();
                if owner == highest {
                    let cand = (owner, v.sender, *e);
                    pooled_commit
                        .entry(e.slot)
                        .and_modify(|cur| {
                            if (cand.0, std::cmp::Reverse(cand.1)) > (cur.0, std::cmp::Reverse(cur.1)) {
                                *cur = cand;
                            }
                        })
                        .or_insert(cand);
                }
            }
        }
    }

    let supported = |e: &OwnerChangeEntry| -> bool {
        support
            .get(&(e.slot, so_identity(e)))
            .map(|s| s.len() >= cfg.f + 1)
            .unwrap_or(false)
    };
    let commit_proven_own = |e: &OwnerChangeEntry| -> bool {
        e.commit.as_ref().map(|ev| ev.owner() == highest).unwrap_or(false)
    };
    let commit_proven_pooled =
        |e: &OwnerChangeEntry| -> bool { pooled_commit.contains_key(&e.slot) };

    // A view satisfies a condition when every entry it reports is provable
    // under that condition; the empty view satisfies both vacuously.
    let cond1 = |v: &View<'_>| v.entries.iter().all(|e| commit_proven_own(e));
    let cond2 = |v: &View<'_>| v.entries.iter().all(|e| supported(e));

    let mut base: Option<&View<'_>> = None;
    let mut base_cond = (false, false);
    for v in &views {
        let c = (cond1(v), cond2(v));
        if !c.0 && !c.1 {
            continue;
        }
        let better = match base {
            None => true,
            Some(b) => v.entries.len() > b.entries.len(),
        };
        if better {
            base = Some(v);
            base_cond = c;
        }
    }

    let Some(base) = base else { return Vec::new() };
    let base_ids: Vec<Signature> = base.entries.iter().map(|e| so_identity(e)).collect();

    // Extensions: a strictly longer view matching the base entry-for-entry,
    // whose extra entries each carry the complementary proof.
    let extension_ok = |e: &OwnerChangeEntry| -> bool {
        (base_cond.0 && supported(e)) || (base_cond.1 && commit_proven_pooled(e))
    };
    let mut chosen: &View<'_> = base;
    for v in &views {
        if v.entries.len() <= chosen.entries.len() {
            continue;
        }
        let prefix_matches = base_ids
            .iter()
            .enumerate()
            .all(|(i, id)| so_identity(v.entries[i]) == *id);
        if !prefix_matches {
            continue;
        }
        if v.entries[base_ids.len()..].iter().all(|e| extension_ok(e)) {
            chosen = v;
        }
    }

    chosen
        .entries
        .iter()
        .map(|e| OwnerChangeEntry {
            slot: e.slot,
            spec_order: e.spec_order.clone(),
            commit: pooled_commit
                .get(&e.slot)
                .filter(|(_, _, p)| p.spec_order.sig == e.spec_order.sig)
                .and_then(|(_, _, p)| p.commit.clone())
                .or_else(|| e.commit.clone()),
        })
        .collect()
}

/// The metadata a replica adopts for a safe entry: certified values when the
/// entry carries commit evidence, the signed order's own values otherwise.
pub fn entry_metadata(
    cfg: &ProtocolConfig,
    e: &OwnerChangeEntry,
) -> (crate::types::DepSet, crate::types::SeqNo, Option<crate::types::CertKind>) {
    if let Some(ev) = &e.commit {
        if let Some((deps, seq)) = evidence_valid(cfg, e, ev) {
            let kind = match ev {
                CommitEvidence::Fast(_) => crate::types::CertKind::Fast,
                CommitEvidence::Slow(_) => crate::types::CertKind::Slow,
            };
            return (deps, seq, Some(kind));
        }
    }
    (e.spec_order.core.deps.clone(), e.spec_order.core.seq, None)
}
