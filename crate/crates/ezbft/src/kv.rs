//! The replicated application: a key-value store with a command language,
//! the command interference relation, and a versioned state that supports
//! speculative application, rollback, and final application.

use crate::crypto::NodeId;
use crate::types::InstanceId;
use std::collections::BTreeMap;

/// A stored value: either an opaque byte string or a counter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Value {
    Bytes(Vec<u8>),
    Int(i64),
}

/// The operation a command performs on the store.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Op {
    Get,
    Put(Value),
    /// Add a delta to a counter. Commutes with other increments.
    Inc(i64),
}

/// Unique command identity: issuing client plus its per-client timestamp.
pub type CommandId = (NodeId, u64);

/// An application operation together with the inputs of the interference
/// relation (key and op kind).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Command {
    pub client: NodeId,
    pub t: u64,
    pub key: Vec<u8>,
    pub op: Op,
}

impl Command {
    pub fn id(&self) -> CommandId {
        (self.client, self.t)
    }

    pub fn key_str(&self) -> String {
        String::from_utf8_lossy(&self.key).into_owned()
    }
}

/// The result of executing a command.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Reply {
    Ack,
    Value(Value),
    /// Distinguished result for a read of an absent key.
    Empty,
}

/// Two commands interfere when executing them in the two possible orders can
/// differ in final state or in replies. Reads commute with reads, and
/// increments commute with increments. Two orderings of the same command
/// (a retransmitted request adopted by more than one command-leader) also
/// commute: execution is exactly-once, so whichever instance runs second is
/// a no-op.
pub fn interferes(a: &Command, b: &Command) -> bool {
    if a.id() == b.id() {
        return false;
    }
    if a.key != b.key {
        return false;
    }
    match (&a.op, &b.op) {
        (Op::Get, Op::Get) => false,
        (Op::Inc(_), Op::Inc(_)) => false,
        _ => true,
    }
}

/// Execution mode for `apply`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyMode {
    Speculative,
    Final,
}

#[derive(Debug, Clone, Default)]
struct Cell {
    final_v: Option<Value>,
    /// Speculative overlay; present only while a speculative write is live.
    spec_v: Option<Value>,
}

/// One speculative application, remembered so it can be undone.
#[derive(Debug, Clone)]
pub struct UndoEntry {
    pub instance: InstanceId,
    pub key: Vec<u8>,
    prev_overlay: Option<Value>,
    had_overlay: bool,
}

/// Versioned key-value state. Final applications mutate the final chain
/// only; speculative applications build an overlay recorded in an undo log
/// in application order.
#[derive(Debug, Clone, Default)]
pub struct KvState {
    cells: BTreeMap<Vec<u8>, Cell>,
    undo: Vec<UndoEntry>,
}

impl KvState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply a command. Speculative mode reads the latest of overlay/final
    /// and writes the overlay; final mode reads and writes the final chain
    /// only.
    pub fn apply(&mut self, instance: InstanceId, cmd: &Command, mode: ApplyMode) -> Reply {
        match mode {
            ApplyMode::Speculative => self.apply_spec(instance, cmd),
            ApplyMode::Final => self.apply_final(cmd),
        }
    }

    fn read_spec(&self, key: &[u8]) -> Option<&Value> {
        self.cells.get(key).and_then(|c| c.spec_v.as_ref().or(c.final_v.as_ref()))
    }

    fn read_final(&self, key: &[u8]) -> Option<&Value> {
        self.cells.get(key).and_then(|c| c.final_v.as_ref())
    }

    fn apply_spec(&mut self, instance: InstanceId, cmd: &Command) -> Reply {
        match &cmd.op {
            Op::Get => match self.read_spec(&cmd.key) {
                Some(v) => Reply::Value(v.clone()),
                None => Reply::Empty,
            },
            Op::Put(v) => {
                self.write_spec(instance, &cmd.key, v.clone());
                Reply::Ack
            }
            Op::Inc(d) => {
                let cur = match self.read_spec(&cmd.key) {
                    Some(Value::Int(n)) => *n,
                    _ => 0,
                };
                self.write_spec(instance, &cmd.key, Value::Int(cur + d));
                Reply::Ack
            }
        }
    }

    fn write_spec(&mut self, instance: InstanceId, key: &[u8], v: Value) {
        let cell = self.cells.entry(key.to_vec()).or_default();
        self.undo.push(UndoEntry {
            instance,
            key: key.to_vec(),
            prev_overlay: cell.spec_v.clone(),
            had_overlay: cell.spec_v.is_some(),
        });
        cell.spec_v = Some(v);
    }

    fn apply_final(&mut self, cmd: &Command) -> Reply {
        match &cmd.op {
            Op::Get => match self.read_final(&cmd.key) {
                Some(v) => Reply::Value(v.clone()),
                None => Reply::Empty,
            },
            Op::Put(v) => {
                self.cells.entry(cmd.key.clone()).or_default().final_v = Some(v.clone());
                Reply::Ack
            }
            Op::Inc(d) => {
                let cell = self.cells.entry(cmd.key.clone()).or_default();
                let cur = match &cell.final_v {
                    Some(Value::Int(n)) => *n,
                    _ => 0,
                };
                cell.final_v = Some(Value::Int(cur + d));
                Reply::Ack
            }
        }
    }

    /// Discard every speculative entry, restoring exactly the final-tagged
    /// state. Returns the instances whose speculative effects were undone,
    /// in application order.
    pub fn rollback_all(&mut self) -> Vec<InstanceId> {
        let mut undone: Vec<InstanceId> = Vec::new();
        while let Some(entry) = self.undo.pop() {
            self.undo_one(&entry);
            undone.push(entry.instance);
        }
        undone.reverse();
        undone.dedup();
        undone
    }

    /// Roll the undo log back to (and including) the earliest speculative
    /// entry touching any of `keys`. Entries applied after that point are
    /// undone as well, regardless of key, because the log is last-in
    /// first-out. Returns the undone instances in original application
    /// order; the caller re-applies the survivors it still believes in.
    pub fn rollback_touching(&mut self, keys: &std::collections::BTreeSet<Vec<u8>>) -> Vec<InstanceId> {
        let earliest = self.undo.iter().position(|e| keys.contains(&e.key));
        let Some(cut) = earliest else { return Vec::new() };
        let mut undone: Vec<InstanceId> = Vec::new();
        while self.undo.len() > cut {
            let entry = self.undo.pop().expect("len checked");
            self.undo_one(&entry);
            undone.push(entry.instance);
        }
        undone.reverse();
        undone.dedup();
        undone
    }

    fn undo_one(&mut self, entry: &UndoEntry) {
        if let Some(cell) = self.cells.get_mut(&entry.key) {
            cell.spec_v = if entry.had_overlay { entry.prev_overlay.clone() } else { None };
        }
    }

    pub fn has_speculative(&self) -> bool {
        !self.undo.is_empty()
    }

    /// The final-tagged contents, for end-of-run comparison.
    pub fn final_map(&self) -> BTreeMap<Vec<u8>, Value> {
        self.cells
            .iter()
            .filter_map(|(k, c)| c.final_v.clone().map(|v| (k.clone(), v)))
            .collect()
    }

    /// The visible contents with the speculative overlay applied.
    pub fn speculative_map(&self) -> BTreeMap<Vec<u8>, Value> {
        self.cells
            .iter()
            .filter_map(|(k, c)| c.spec_v.clone().or_else(|| c.final_v.clone()).map(|v| (k.clone(), v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::InstanceId;

    fn cmd(client: u32, t: u64, key: &str, op: Op) -> Command {
        Command { client: NodeId::Client(client), t, key: key.as_bytes().to_vec(), op }
    }

    fn inst(r: u32, s: u64) -> InstanceId {
        InstanceId { space: r, slot: s }
    }

    #[test]
    fn interference_table() {
        let put1 = cmd(0, 1, "x", Op::Put(Value::Int(1)));
        let put2 = cmd(1, 1, "x", Op::Put(Value::Int(2)));
        let get = cmd(0, 2, "x", Op::Get);
        let get2 = cmd(1, 2, "x", Op::Get);
        let inc = cmd(0, 3, "x", Op::Inc(1));
        let inc2 = cmd(1, 3, "x", Op::Inc(5));
        let put_other = cmd(0, 4, "y", Op::Put(Value::Int(1)));

        assert!(interferes(&put1, &put2));
        assert!(!interferes(&get, &get2));
        assert!(!interferes(&inc, &inc2));
        assert!(interferes(&put1, &get));
        assert!(interferes(&inc, &get));
        assert!(interferes(&inc, &put1));
        assert!(!interferes(&put1, &put_other));
    }

    #[test]
    fn interference_symmetric_all_pairs() {
        let ops = [Op::Get, Op::Put(Value::Int(9)), Op::Inc(2)];
        for a in &ops {
            for b in &ops {
                let ca = cmd(0, 1, "k", a.clone());
                let cb = cmd(1, 1, "k", b.clone());
                assert_eq!(interferes(&ca, &cb), interferes(&cb, &ca));
            }
        }
    }

    /// Independent oracle: serially execute a pair on a fresh final state in
    /// both orders. Commands declared non-interfering must agree on both
    /// final state and replies; this is checked exhaustively for every op
    /// pair on one key. The converse need not hold (interference is decided
    /// from static fields, so e.g. two identical puts "interfere" while
    /// trivially commuting).
    #[test]
    fn non_interfering_pairs_commute() {
        let ops = [
            Op::Get,
            Op::Put(Value::Int(1)),
            Op::Put(Value::Bytes(b"b".to_vec())),
            Op::Inc(3),
            Op::Inc(-2),
        ];
        for a in &ops {
            for b in &ops {
                let ca = cmd(0, 1, "k", a.clone());
                let cb = cmd(1, 1, "k", b.clone());
                if interferes(&ca, &cb) {
                    continue;
                }

                let mut s1 = KvState::new();
                let r1a = s1.apply(inst(0, 0), &ca, ApplyMode::Final);
                let r1b = s1.apply(inst(0, 1), &cb, ApplyMode::Final);

                let mut s2 = KvState::new();
                let r2b = s2.apply(inst(0, 1), &cb, ApplyMode::Final);
                let r2a = s2.apply(inst(0, 0), &ca, ApplyMode::Final);

                assert_eq!(s1.final_map(), s2.final_map(), "state for {:?} vs {:?}", a, b);
                assert_eq!(r1a, r2a, "first reply for {:?} vs {:?}", a, b);
                assert_eq!(r1b, r2b, "second reply for {:?} vs {:?}", a, b);
            }
        }
    }

    #[test]
    fn read_your_speculative_write() {
        let mut s = KvState::new();
        s.apply(inst(0, 0), &cmd(0, 1, "x", Op::Put(Value::Int(1))), ApplyMode::Speculative);
        let r = s.apply(inst(0, 1), &cmd(0, 2, "x", Op::Get), ApplyMode::Speculative);
        assert_eq!(r, Reply::Value(Value::Int(1)));
    }

    #[test]
    fn rollback_restores_final_state() {
        let mut s = KvState::new();
        s.apply(inst(0, 0), &cmd(0, 1, "x", Op::Put(Value::Int(7))), ApplyMode::Final);
        s.apply(inst(0, 1), &cmd(0, 2, "x", Op::Put(Value::Int(8))), ApplyMode::Speculative);
        s.apply(inst(0, 2), &cmd(0, 3, "y", Op::Put(Value::Int(9))), ApplyMode::Speculative);
        s.rollback_all();
        assert!(!s.has_speculative());
        assert_eq!(s.final_map().get(&b"x"[..].to_vec()), Some(&Value::Int(7)));
        assert_eq!(s.final_map().get(&b"y"[..].to_vec()), None);
        assert_eq!(s.speculative_map().get(&b"x"[..].to_vec()), Some(&Value::Int(7)));
    }

    #[test]
    fn rollback_on_final_only_state_is_identity() {
        let mut s = KvState::new();
        s.apply(inst(0, 0), &cmd(0, 1, "x", Op::Put(Value::Int(7))), ApplyMode::Final);
        let before = s.final_map();
        let undone = s.rollback_all();
        assert!(undone.is_empty());
        assert_eq!(before, s.final_map());
    }

    #[test]
    fn final_read_ignores_overlay() {
        let mut s = KvState::new();
        s.apply(inst(0, 0), &cmd(0, 1, "x", Op::Put(Value::Int(1))), ApplyMode::Final);
        s.apply(inst(0, 1), &cmd(0, 2, "x", Op::Put(Value::Int(2))), ApplyMode::Speculative);
        let r = s.apply(inst(0, 2), &cmd(0, 3, "x", Op::Get), ApplyMode::Final);
        assert_eq!(r, Reply::Value(Value::Int(1)));
    }

    #[test]
    fn put_order_is_an_interference_witness() {
        let mut s1 = KvState::new();
        s1.apply(inst(0, 0), &cmd(0, 1, "x", Op::Put(Value::Int(1))), ApplyMode::Final);
        s1.apply(inst(0, 1), &cmd(1, 1, "x", Op::Put(Value::Int(2))), ApplyMode::Final);
        let mut s2 = KvState::new();
        s2.apply(inst(0, 1), &cmd(1, 1, "x", Op::Put(Value::Int(2))), ApplyMode::Final);
        s2.apply(inst(0, 0), &cmd(0, 1, "x", Op::Put(Value::Int(1))), ApplyMode::Final);
        assert_ne!(s1.final_map(), s2.final_map());
    }

    #[test]
    fn partial_rollback_undoes_suffix_from_first_touch() {
        let mut s = KvState::new();
        s.apply(inst(0, 0), &cmd(0, 1, "a", Op::Put(Value::Int(1))), ApplyMode::Speculative);
        s.apply(inst(0, 1), &cmd(0, 2, "b", Op::Put(Value::Int(2))), ApplyMode::Speculative);
        s.apply(inst(0, 2), &cmd(0, 3, "c", Op::Put(Value::Int(3))), ApplyMode::Speculative);
        let keys: std::collections::BTreeSet<_> = [b"b".to_vec()].into_iter().collect();
        let undone = s.rollback_touching(&keys);
        assert_eq!(undone, vec![inst(0, 1), inst(0, 2)]);
        // "a" survives untouched, "b" and "c" rolled back.
        assert_eq!(s.speculative_map().get(&b"a"[..].to_vec()), Some(&Value::Int(1)));
        assert_eq!(s.speculative_map().get(&b"b"[..].to_vec()), None);
        assert_eq!(s.speculative_map().get(&b"c"[..].to_vec()), None);
    }

    /// Rollback followed by final re-execution in a new order must match a
    /// fresh serial run of that order.
    #[test]
    fn rollback_then_final_matches_serial_oracle() {
        let c1 = cmd(0, 1, "x", Op::Put(Value::Int(1)));
        let c2 = cmd(1, 1, "x", Op::Put(Value::Int(2)));

        let mut s = KvState::new();
        s.apply(inst(0, 0), &c1, ApplyMode::Speculative);
        s.apply(inst(3, 0), &c2, ApplyMode::Speculative);
        s.rollback_all();
        s.apply(inst(3, 0), &c2, ApplyMode::Final);
        s.apply(inst(0, 0), &c1, ApplyMode::Final);

        let mut oracle = KvState::new();
        oracle.apply(inst(3, 0), &c2, ApplyMode::Final);
        oracle.apply(inst(0, 0), &c1, ApplyMode::Final);

        assert_eq!(s.final_map(), oracle.final_map());
    }
}
