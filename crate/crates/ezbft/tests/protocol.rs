//! Scenario-level protocol behavior, checked against full simulator runs.

use ezbft::harness;

/// A single fault-free command produces exactly the canonical fast-path
/// message pattern: one request, N-1 order relays, N replies, and N
/// certificate deliveries.
#[test]
fn fast_path_message_pattern() {
    let mut sc = harness::load_config("fig1_fastpath").unwrap();
    sc.requests_per_client = 1;
    sc.clients[0].requests = 1;
    let r = harness::run_config(&sc).unwrap();
    let d = &r.outcome.stats.deliveries_by_kind;
    assert_eq!(d.get("Request").copied().unwrap_or(0), 1);
    assert_eq!(d.get("SpecOrder").copied().unwrap_or(0), 3);
    assert_eq!(d.get("SpecReply").copied().unwrap_or(0), 4);
    assert_eq!(d.get("CommitFast").copied().unwrap_or(0), 4);
    assert_eq!(d.get("Commit").copied().unwrap_or(0), 0);
    assert!(r.invariants.all_passed());
}

/// The mute-leader path: a client homed at a silent replica triggers resend
/// relays and an ownership-change vote.
#[test]
fn mute_home_replica_triggers_owner_change_machinery() {
    let mut sc = harness::load_config("crash_home").unwrap();
    // Same geometry, but mute instead of crash, so the replica still
    // receives; only its sends are suppressed. A short resend wait makes the
    // relays give up on R0 before the client re-homes away from it.
    sc.faults.clear();
    sc.faults.push(harness::scenario::FaultSpec {
        replica: 0,
        behavior: ezbft::sim::faults::FaultBehavior::Mute { from_us: 0, to_us: 60_000_000 },
    });
    sc.resend_wait_ms = 50;
    let r = harness::run_config(&sc).unwrap();
    assert!(r.outcome.trace.contains(" ResendReq "), "resend relays must appear");
    assert!(r.outcome.trace.contains(" StartOwnerChange "), "change votes must appear");
    assert_eq!(r.metrics.undelivered, 0, "all commands still delivered");
    assert!(r.invariants.all_passed());
}

/// Equivocation: the client must produce a verifying proof, ownership must
/// move to the next replica, and the space must freeze at every correct
/// replica.
#[test]
fn equivocation_recovers_with_owner_change() {
    let r = harness::run_file("equivocate").unwrap();
    assert!(r.outcome.stats.poms >= 1, "a proof of misbehavior must circulate");
    assert!(r.outcome.trace.contains(" NewOwner "), "the new owner must announce");
    for replica in &r.outcome.correct_replicas {
        assert!(
            r.outcome.frozen_spaces[replica].contains(&0),
            "R{replica} must freeze the equivocator's space"
        );
    }
    assert_eq!(r.metrics.undelivered, 0);
    assert!(r.outcome.violations.is_empty());
    assert!(r.invariants.all_passed());
}

/// Messages lost to a partition are recovered after it heals; nothing is
/// delivered twice and the replicas converge.
#[test]
fn partition_heals_and_delivers() {
    let r = harness::run_file("partition_heal").unwrap();
    assert_eq!(r.metrics.undelivered, 0);
    assert!(r.outcome.violations.is_empty());
    let serializable =
        r.invariants.properties.iter().find(|p| p.name == "serializable").unwrap();
    assert!(serializable.passed);
}

/// A crashed-at-start home replica: the client re-homes and completes on
/// the slow path.
#[test]
fn crashed_home_replica_rehomes() {
    let r = harness::run_file("crash_home").unwrap();
    assert!(r.outcome.stats.rehomes >= 1, "the stranded client must re-home");
    assert_eq!(r.metrics.undelivered, 0);
    assert!(r.invariants.all_passed());
}

/// Commutative hot-key operations keep the fast path even at full
/// contention.
#[test]
fn commuting_increments_stay_fast_under_contention() {
    let mut sc = harness::load_config("four_region").unwrap();
    sc.hot_op = harness::scenario::HotOp::Inc;
    sc.conflict = 1.0;
    for c in &mut sc.clients {
        c.conflict = 1.0;
    }
    let r = harness::run_config(&sc).unwrap();
    assert_eq!(r.metrics.fast_ratio, 1.0, "increments commute and stay fast");
    assert!(r.invariants.all_passed());
}

/// Out-of-model scenarios are rejected unless explicitly allowed.
#[test]
fn too_many_faults_rejected_without_override() {
    let mut sc = harness::load_config("mute_replica").unwrap();
    sc.faults.push(harness::scenario::FaultSpec {
        replica: 2,
        behavior: ezbft::sim::faults::FaultBehavior::Crash { at_us: 0 },
    });
    assert!(harness::run_config(&sc).is_err());
    sc.allow_out_of_model = true;
    assert!(harness::run_config(&sc).is_ok(), "override admits the scenario");
}

/// Degraded links: one replica adds delay, another drops a fraction of its
/// messages. Retransmissions and quorums still deliver everything.
#[test]
fn delay_and_drop_faults_still_deliver() {
    let mut sc = harness::load_config("mute_replica").unwrap();
    sc.faults.clear();
    sc.faults.push(harness::scenario::FaultSpec {
        replica: 3,
        behavior: ezbft::sim::faults::FaultBehavior::Delay { extra_us: 150_000 },
    });
    sc.faults.push(harness::scenario::FaultSpec {
        replica: 2,
        behavior: ezbft::sim::faults::FaultBehavior::Drop { probability: 0.4 },
    });
    for seed in 0..20u64 {
        sc.seed = seed;
        let r = harness::run_config(&sc).unwrap();
        assert_eq!(r.metrics.undelivered, 0, "seed {seed}");
        assert!(r.outcome.violations.is_empty(), "seed {seed}");
    }
}

/// Equivocation under contention with a bystander client: the ownership
/// change commits the racing commands, later commands depend on re-homed
/// duplicates, and the committed twins keep execution unblocked.
#[test]
fn equivocation_under_contention_stays_live() {
    for seed in [3u64, 11, 27, 43] {
        let mut sc = harness::load_config("equivocate").unwrap();
        sc.seed = seed;
        sc.jitter_ms = 8;
        sc.requests_per_client = 3;
        for c in &mut sc.clients {
            c.requests = 3;
        }
        sc.clients.push(harness::scenario::ClientSpec {
            home: 2,
            region: 2,
            requests: 3,
            conflict: 1.0,
            start_ms: 0,
        });
        let r = harness::run_config(&sc).unwrap();
        assert!(r.outcome.violations.is_empty(), "seed {seed}");
        assert_eq!(r.metrics.undelivered, 0, "seed {seed}");
    }
}

/// Independent scenarios are isolated: runs fanned across worker threads
/// produce the same digests as serial runs.
#[test]
fn scenarios_run_in_parallel_threads() {
    let names = ["fig1_fastpath", "fig2_conflict", "fig3_lying_r2", "mute_replica"];
    let serial: Vec<_> =
        names.iter().map(|n| harness::run_file(n).unwrap().outcome.trace_digest).collect();
    let handles: Vec<_> = names
        .into_iter()
        .map(|n| std::thread::spawn(move || harness::run_file(n).unwrap().outcome.trace_digest))
        .collect();
    for (h, want) in handles.into_iter().zip(serial) {
        assert_eq!(h.join().unwrap(), want);
    }
}
