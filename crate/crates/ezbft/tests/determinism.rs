//! Golden run fingerprints. A digest change here means the trace format,
//! the protocol's message flow, or the scheduler changed; refresh the
//! constants deliberately when that is intended.

use ezbft::harness;

const GOLDEN: &[(&str, &str)] = &[
    ("fig1_fastpath", "67b62a62548414f10d83cf3e3dc0eccf7a8f961e667c83841da908e5524dd36a"),
    ("fig2_conflict", "227bd5bc"),
    ("fig3_lying_r2", "cfaa42be"),
];

#[test]
fn golden_trace_digests() {
    for (name, want) in GOLDEN {
        let r = harness::run_file(name).unwrap();
        let got = r.outcome.trace_digest.hex();
        assert!(
            got.starts_with(want),
            "{name}: trace digest changed: wanted {want}.., got {got}"
        );
    }
}

/// The partial (key-scoped) rollback and the full-rollback reference mode
/// must agree on every observable outcome.
#[test]
fn rollback_modes_are_equivalent() {
    for name in ["fig2_conflict", "fig3_lying_r2", "equivocate", "four_region"] {
        let mut partial = harness::load_config(name).unwrap();
        partial.partial_rollback = true;
        let mut full = partial.clone();
        full.partial_rollback = false;

        let rp = harness::run_config(&partial).unwrap();
        let rf = harness::run_config(&full).unwrap();

        assert_eq!(rp.outcome.final_kv, rf.outcome.final_kv, "{name}: final states differ");
        assert_eq!(
            rp.outcome.delivered_replies, rf.outcome.delivered_replies,
            "{name}: delivered replies differ"
        );
        assert_eq!(
            rp.outcome.final_orders, rf.outcome.final_orders,
            "{name}: execution orders differ"
        );
        assert!(rf.invariants.all_passed());
    }
}

/// High contention with a sweep of seeds: both rollback modes stay
/// equivalent when speculation is invalidated frequently.
#[test]
fn rollback_modes_agree_under_contention() {
    for seed in 0..10u64 {
        let mut sc = harness::load_config("four_region").unwrap();
        sc.seed = seed;
        sc.conflict = 0.8;
        for c in &mut sc.clients {
            c.conflict = 0.8;
        }
        sc.jitter_ms = 5;
        let mut full = sc.clone();
        full.partial_rollback = false;
        let rp = harness::run_config(&sc).unwrap();
        let rf = harness::run_config(&full).unwrap();
        assert_eq!(rp.outcome.final_kv, rf.outcome.final_kv, "seed {seed}");
        assert_eq!(rp.outcome.delivered_replies, rf.outcome.delivered_replies, "seed {seed}");
    }
}
