//! Online safety monitor. After every event it checks, across all correct
//! replicas, that no instance ever holds two different commands and that
//! committed sets only grow.

use crate::crypto::Digest;
use crate::kv::CommandId;
use crate::replica::Replica;
use crate::types::InstanceId;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct Violation {
    pub property: &'static str,
    pub detail: String,
    pub trace_line: u64,
}

#[derive(Debug, Default)]
pub struct Monitor {
    /// Committed command per instance, across all correct replicas.
    committed: BTreeMap<InstanceId, (CommandId, Digest)>,
    /// Per-replica committed view, for stability checking.
    per_replica: BTreeMap<u32, BTreeMap<InstanceId, (CommandId, Digest)>>,
    pub violations: Vec<Violation>,
}

impl Monitor {
    pub fn new() -> Self {
        Self::default()
    }

    fn violate(&mut self, property: &'static str, detail: String, trace_line: u64) {
        self.violations.push(Violation { property, detail, trace_line });
    }

    /// Diff one correct replica's committed records against what the
    /// monitor has seen so far.
    pub fn observe(&mut self, replica: &Replica, trace_line: u64) {
        let id = replica.id;
        let now: BTreeMap<InstanceId, (CommandId, Digest)> = replica
            .committed_records()
            .into_iter()
            .map(|(inst, rec)| (inst, (rec.command().id(), rec.spec_order.core.req_digest)))
            .collect();

        let prev = self.per_replica.entry(id).or_default();
        for (inst, val) in prev.iter() {
            match now.get(inst) {
                None => self.violations.push(Violation {
                    property: "stability",
                    detail: format!("R{} lost committed instance {}", id, inst),
                    trace_line,
                }),
                Some(v) if v != val => self.violations.push(Violation {
                    property: "stability",
                    detail: format!("R{} changed committed command at {}", id, inst),
                    trace_line,
                }),
                Some(_) => {}
            }
        }
        *prev = now.clone();

        for (inst, val) in now {
            match self.committed.get(&inst) {
                None => {
                    self.committed.insert(inst, val);
                }
                Some(seen) if *seen != val => {
                    self.violate(
                        "consistency",
                        format!("two different commands committed at {}", inst),
                        trace_line,
                    );
                }
                Some(_) => {}
            }
        }
    }

    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}
