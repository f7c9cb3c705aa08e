//! Post-run invariant checking: the four protocol properties plus the
//! serializability oracle over the execution engine's global order.

use crate::exec;
use crate::kv::{interferes, ApplyMode, Command, CommandId, KvState};
use crate::sim::RunOutcome;
use crate::types::InstanceId;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, serde::Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub applicable: bool,
    pub detail: String,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct InvariantReport {
    pub properties: Vec<PropertyResult>,
}

impl InvariantReport {
    pub fn all_passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed || !p.applicable)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.properties {
            let status = if !p.applicable {
                "SKIP"
            } else if p.passed {
                "PASS"
            } else {
                "FAIL"
            };
            s.push_str(&format!("{:14} {} {}\n", p.name, status, p.detail));
        }
        s
    }
}

/// Scenario facts the checks depend on.
pub struct CheckContext {
    /// True when at most f replicas are scripted faulty and the network
    /// stays connected (no partitions): the liveness property applies.
    pub in_model: bool,
    /// True when no replica is scripted faulty at all.
    pub fault_free: bool,
    /// True when no two commands ever interfere (0% conflict).
    pub contention_free: bool,
}

pub fn check(out: &RunOutcome, ctx: &CheckContext) -> InvariantReport {
    let mut properties = Vec::new();

    // Nontriviality: everything finally executed was proposed by a client.
    {
        let mut bad = None;
        'outer: for r in &out.correct_replicas {
            for (inst, info) in &out.committed[r] {
                if info.finally_executed && !out.submitted.contains_key(&info.cmd) {
                    bad = Some(format!("R{} executed unproposed command at {}", r, inst));
                    break 'outer;
                }
            }
        }
        properties.push(PropertyResult {
            name: "nontriviality",
            passed: bad.is_none(),
            applicable: true,
            detail: bad.unwrap_or_else(|| "all executed commands were proposed".into()),
        });
    }

    // Consistency: monitor caught nothing, and final committed views agree
    // per instance across correct replicas.
    {
        let monitor_bad: Vec<_> =
            out.violations.iter().filter(|v| v.property == "consistency").collect();
        let mut cross = BTreeMap::new();
        let mut conflict = None;
        for r in &out.correct_replicas {
            for (inst, info) in &out.committed[r] {
                match cross.get(inst) {
                    None => {
                        cross.insert(*inst, info.req_digest);
                    }
                    Some(d) if *d != info.req_digest => {
                        conflict = Some(format!("instance {} differs across replicas", inst));
                    }
                    Some(_) => {}
                }
            }
        }
        let passed = monitor_bad.is_empty() && conflict.is_none();
        let detail = if let Some(v) = monitor_bad.first() {
            format!("{} (trace line {})", v.detail, v.trace_line)
        } else {
            conflict.unwrap_or_else(|| "per-instance agreement holds".into())
        };
        properties.push(PropertyResult { name: "consistency", passed, applicable: true, detail });
    }

    // Stability: committed sets only ever grew.
    {
        let bad: Vec<_> = out.violations.iter().filter(|v| v.property == "stability").collect();
        properties.push(PropertyResult {
            name: "stability",
            passed: bad.is_empty(),
            applicable: true,
            detail: bad
                .first()
                .map(|v| format!("{} (trace line {})", v.detail, v.trace_line))
                .unwrap_or_else(|| "committed sets grew monotonically".into()),
        });
    }

    // Liveness: within the time limit, every submitted command delivered.
    {
        let undelivered: Vec<CommandId> = out
            .commands
            .values()
            .filter(|c| c.deliver_us.is_none())
            .map(|c| (crate::crypto::NodeId::Client(c.client), c.t))
            .collect();
        properties.push(PropertyResult {
            name: "liveness",
            passed: undelivered.is_empty(),
            applicable: ctx.in_model,
            detail: if undelivered.is_empty() {
                "every submitted command was delivered".into()
            } else {
                format!("{} commands undelivered", undelivered.len())
            },
        });
    }

    // Serializability oracle.
    {
        let (passed, detail) = serializability_oracle(out);
        properties.push(PropertyResult { name: "serializable", passed, applicable: true, detail });
    }

    // Speculative/final coincidence applies only to fault-free,
    // contention-free runs; there the delivered (speculative) reply must
    // equal what a serial final execution produces, which the oracle above
    // already pins. Here we check every delivery used the fast path.
    {
        let applicable = ctx.fault_free && ctx.contention_free;
        let all_fast = out
            .commands
            .values()
            .all(|c| c.path.is_none() || c.path == Some(crate::actions::Path::Fast));
        properties.push(PropertyResult {
            name: "spec-coincide",
            passed: all_fast,
            applicable,
            detail: if !applicable {
                "only checked for fault-free, contention-free runs".into()
            } else if all_fast {
                "speculative replies were final".into()
            } else {
                "a contention-free fault-free run took the slow path".into()
            },
        });
    }

    InvariantReport { properties }
}

/// Rebuild the global dependency graph from committed instances, linearize
/// it with the engine, execute serially, and compare with each replica's
/// final state. Also checks pairwise that interfering committed commands
/// executed in the same relative order everywhere.
fn serializability_oracle(out: &RunOutcome) -> (bool, String) {
    // Union of committed instances across correct replicas.
    let mut nodes: BTreeMap<InstanceId, exec::ExecNode> = BTreeMap::new();
    let mut cmd_of: BTreeMap<InstanceId, CommandId> = BTreeMap::new();
    for r in &out.correct_replicas {
        for (inst, info) in &out.committed[r] {
            nodes.entry(*inst).or_insert_with(|| exec::ExecNode {
                seq: info.seq,
                deps: info.deps.clone(),
                committed: true,
            });
            cmd_of.insert(*inst, info.cmd);
        }
    }

    // Pairwise execution-order agreement for interfering commands.
    let commands: &BTreeMap<CommandId, Command> = &out.submitted;
    for (i, a) in out.correct_replicas.iter().enumerate() {
        for b in &out.correct_replicas[i + 1..] {
            let pos_a: BTreeMap<InstanceId, usize> =
                out.final_orders[a].iter().enumerate().map(|(i, x)| (*x, i)).collect();
            let pos_b: BTreeMap<InstanceId, usize> =
                out.final_orders[b].iter().enumerate().map(|(i, x)| (*x, i)).collect();
            let both: Vec<InstanceId> =
                pos_a.keys().filter(|k| pos_b.contains_key(k)).copied().collect();
            for (ii, x) in both.iter().enumerate() {
                for y in &both[ii + 1..] {
                    let (Some(cx), Some(cy)) = (cmd_of.get(x), cmd_of.get(y)) else { continue };
                    let (Some(mx), Some(my)) = (commands.get(cx), commands.get(cy)) else {
                        continue;
                    };
                    if !interferes(mx, my) {
                        continue;
                    }
                    let same = (pos_a[x] < pos_a[y]) == (pos_b[x] < pos_b[y]);
                    if !same {
                        return (
                            false,
                            format!("R{} and R{} executed {} and {} in different orders", a, b, x, y),
                        );
                    }
                }
            }
        }
    }

    // Global serial execution of the engine's linearization.
    let order = exec::linearize(&nodes);
    let mut oracle = KvState::new();
    let mut executed: BTreeSet<CommandId> = BTreeSet::new();
    for inst in &order {
        let Some(cmd_id) = cmd_of.get(inst) else { continue };
        let Some(cmd) = commands.get(cmd_id) else { continue };
        if executed.insert(*cmd_id) {
            oracle.apply(*inst, cmd, ApplyMode::Final);
        }
    }
    let want = oracle.final_map();

    for r in &out.correct_replicas {
        let all_executed = out.committed[r].len() == nodes.len()
            && out.committed[r].values().all(|i| i.finally_executed);
        if !all_executed {
            // A replica that missed commits cannot be compared against the
            // global order; the pairwise check above still covers it.
            continue;
        }
        if out.final_kv[r] != want {
            return (false, format!("R{} final state diverges from the serial oracle", r));
        }
    }
    (true, format!("{} committed instances serialize", nodes.len()))
}
