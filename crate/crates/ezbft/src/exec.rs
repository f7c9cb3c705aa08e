//! Deterministic execution ordering.
//!
//! Committed commands form a directed dependency graph with possible cycles.
//! The graph is condensed into strongly connected components, the components
//! are processed dependencies-first, and commands inside a component run in
//! ascending (sequence number, space, slot) order. The resulting total order
//! is a pure function of the graph, so every correct replica that sees the
//! same instances executes them identically.

use crate::types::{DepSet, InstanceId, SeqNo};
use std::collections::BTreeMap;

/// What the ordering algorithms need to know about one instance.
#[derive(Debug, Clone)]
pub struct ExecNode {
    pub seq: SeqNo,
    pub deps: DepSet,
    pub committed: bool,
}

/// Strongly connected components of the dependency graph, via an iterative
/// Tarjan walk. Component discovery order is not part of the contract;
/// determinism comes from the explicit sort in [`linearize`].
pub fn strongly_connected_components(
    nodes: &BTreeMap<InstanceId, ExecNode>,
) -> Vec<Vec<InstanceId>> {
    let ids: Vec<InstanceId> = nodes.keys().copied().collect();
    let index_of: BTreeMap<InstanceId, usize> =
        ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let adj: Vec<Vec<usize>> = ids
        .iter()
        .map(|id| {
            nodes[id]
                .deps
                .iter()
                .filter_map(|d| index_of.get(d).copied())
                .collect()
        })
        .collect();

    const UNSET: usize = usize::MAX;
    let n = ids.len();
    let mut index = vec![UNSET; n];
    let mut lowlink = vec![UNSET; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0usize;
    let mut components: Vec<Vec<InstanceId>> = Vec::new();

    // Explicit DFS frames: (vertex, next child position).
    let mut frames: Vec<(usize, usize)> = Vec::new();

    for start in 0..n {
        if index[start] != UNSET {
            continue;
        }
        frames.push((start, 0));
        index[start] = next_index;
        lowlink[start] = next_index;
        next_index += 1;
        stack.push(start);
        on_stack[start] = true;

        while let Some(&mut (v, ref mut child)) = frames.last_mut() {
            if *child < adj[v].len() {
                let w = adj[v][*child];
                *child += 1;
                if index[w] == UNSET {
                    index[w] = next_index;
                    lowlink[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    frames.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
            } else {
                frames.pop();
                if let Some(&(parent, _)) = frames.last() {
                    lowlink[parent] = lowlink[parent].min(lowlink[v]);
                }
                if lowlink[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        comp.push(ids[w]);
                        if w == v {
                            break;
                        }
                    }
                    components.push(comp);
                }
            }
        }
    }
    components
}

/// Total execution order over the given nodes: SCC condensation, components
/// dependencies-first, and (seq, space, slot) order inside each component.
/// Independent components are taken in ascending order of their smallest
/// (seq, space, slot) member, so the output is byte-identical for equal
/// graphs regardless of traversal order.
pub fn linearize(nodes: &BTreeMap<InstanceId, ExecNode>) -> Vec<InstanceId> {
    let mut components = strongly_connected_components(nodes);
    for comp in &mut components {
        comp.sort_by_key(|id| (nodes[id].seq, id.space, id.slot));
    }

    let comp_of: BTreeMap<InstanceId, usize> = components
        .iter()
        .enumerate()
        .flat_map(|(ci, comp)| comp.iter().map(move |id| (*id, ci)))
        .collect();

    // Condensation edges: component -> the components it depends on.
    let mut dep_count = vec![0usize; components.len()];
    let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); components.len()];
    let mut seen: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    for (id, node) in nodes {
        let ci = comp_of[id];
        for d in &node.deps {
            if let Some(&cj) = comp_of.get(d) {
                if ci != cj && seen.insert((ci, cj)) {
                    dep_count[ci] += 1;
                    dependents[cj].push(ci);
                }
            }
        }
    }

    // Kahn over the condensation, dependencies first; ready components are
    // drained in ascending key order.
    let key = |ci: usize| {
        let id = components[ci][0];
        (nodes[&id].seq, id.space, id.slot)
    };
    let mut ready: std::collections::BTreeSet<(SeqNo, u32, u64, usize)> = (0..components.len())
        .filter(|&ci| dep_count[ci] == 0)
        .map(|ci| {
            let k = key(ci);
            (k.0, k.1, k.2, ci)
        })
        .collect();

    let mut order = Vec::with_capacity(nodes.len());
    while let Some(&entry) = ready.iter().next() {
        ready.remove(&entry);
        let ci = entry.3;
        order.extend(components[ci].iter().copied());
        for &cj in &dependents[ci] {
            dep_count[cj] -= 1;
            if dep_count[cj] == 0 {
                let k = key(cj);
                ready.insert((k.0, k.1, k.2, cj));
            }
        }
    }
    debug_assert_eq!(order.len(), nodes.len());
    order
}

/// An instance may be finally executed once it is committed and everything
/// transitively reachable through its dependency edges is a known, committed
/// instance. A dependency that is not present in the map blocks readiness.
pub fn ready_for_final(nodes: &BTreeMap<InstanceId, ExecNode>, instance: InstanceId) -> bool {
    let Some(start) = nodes.get(&instance) else { return false };
    if !start.committed {
        return false;
    }
    let mut visited: std::collections::BTreeSet<InstanceId> = std::collections::BTreeSet::new();
    let mut work = vec![instance];
    visited.insert(instance);
    while let Some(cur) = work.pop() {
        for d in &nodes[&cur].deps {
            match nodes.get(d) {
                None => return false,
                Some(n) if !n.committed => return false,
                Some(_) => {
                    if visited.insert(*d) {
                        work.push(*d);
                    }
                }
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(space: u32, slot: u64) -> InstanceId {
        InstanceId { space, slot }
    }

    fn node(seq: u64, deps: &[InstanceId], committed: bool) -> ExecNode {
        ExecNode { seq: SeqNo(seq), deps: deps.iter().copied().collect(), committed }
    }

    #[test]
    fn chain_executes_dependency_first() {
        let a = inst(0, 0);
        let b = inst(1, 0);
        let mut g = BTreeMap::new();
        g.insert(a, node(2, &[b], true));
        g.insert(b, node(1, &[], true));
        assert_eq!(linearize(&g), vec![b, a]);
    }

    /// Mutual dependencies form one component; equal sequence numbers are
    /// broken by the space identifier, so the command ordered at the lower
    /// replica index goes first.
    #[test]
    fn cycle_breaks_ties_by_replica_id() {
        let l1 = inst(0, 0);
        let l2 = inst(3, 0);
        let mut g = BTreeMap::new();
        g.insert(l1, node(2, &[l2], true));
        g.insert(l2, node(2, &[l1], true));
        assert_eq!(linearize(&g), vec![l1, l2]);
    }

    #[test]
    fn ready_requires_committed_transitive_closure() {
        let a = inst(0, 0);
        let b = inst(1, 0);
        let c = inst(2, 0);
        let mut g = BTreeMap::new();
        g.insert(a, node(3, &[b], true));
        g.insert(b, node(2, &[c], true));
        g.insert(c, node(1, &[], false));
        assert!(!ready_for_final(&g, a), "uncommitted transitive dep blocks");
        g.get_mut(&c).unwrap().committed = true;
        assert!(ready_for_final(&g, a));
    }

    #[test]
    fn ready_with_empty_deps() {
        let a = inst(0, 0);
        let mut g = BTreeMap::new();
        g.insert(a, node(1, &[], true));
        assert!(ready_for_final(&g, a));
    }

    #[test]
    fn unknown_dependency_blocks_readiness() {
        let a = inst(0, 0);
        let mut g = BTreeMap::new();
        g.insert(a, node(1, &[inst(1, 9)], true));
        assert!(!ready_for_final(&g, a));
    }

    #[test]
    fn mutually_dependent_committed_pair_is_ready() {
        let a = inst(0, 0);
        let b = inst(3, 0);
        let mut g = BTreeMap::new();
        g.insert(a, node(2, &[b], true));
        g.insert(b, node(2, &[a], true));
        assert!(ready_for_final(&g, a));
        assert!(ready_for_final(&g, b));
    }

    /// Brute-force oracle: in the linearized order, if b is a dependency of
    /// a and they are not mutually reachable, b must come first. Checked
    /// over seeded random 8-node graphs against plain DFS reachability.
    #[test]
    fn order_respects_cross_component_dependencies() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);

        for _ in 0..300 {
            let ids: Vec<InstanceId> = (0..8).map(|i| inst(i % 4, (i / 4) as u64)).collect();
            let mut g: BTreeMap<InstanceId, ExecNode> = BTreeMap::new();
            for (i, id) in ids.iter().enumerate() {
                let mut deps = DepSet::new();
                for (j, other) in ids.iter().enumerate() {
                    if i != j && rng.gen_bool(0.3) {
                        deps.insert(*other);
                    }
                }
                g.insert(*id, ExecNode { seq: SeqNo(rng.gen_range(1..5)), deps, committed: true });
            }

            let reaches = |from: InstanceId, to: InstanceId| -> bool {
                let mut seen = std::collections::BTreeSet::new();
                let mut work = vec![from];
                while let Some(cur) = work.pop() {
                    if cur == to {
                        return true;
                    }
                    if seen.insert(cur) {
                        work.extend(g[&cur].deps.iter().copied());
                    }
                }
                false
            };

            let order = linearize(&g);
            assert_eq!(order.len(), g.len());
            let pos: BTreeMap<InstanceId, usize> =
                order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
            for (id, n) in &g {
                for d in &n.deps {
                    let same_scc = reaches(*id, *d) && reaches(*d, *id);
                    if !same_scc {
                        assert!(
                            pos[d] < pos[id],
                            "dep {} must precede {} in {:?}",
                            d,
                            id,
                            order
                        );
                    }
                }
            }
        }
    }

    /// Equal graphs linearize identically no matter how the map was built.
    #[test]
    fn linearize_is_deterministic() {
        let mut g1 = BTreeMap::new();
        let mut g2 = BTreeMap::new();
        let items = [
            (inst(0, 0), node(1, &[], true)),
            (inst(1, 0), node(2, &[inst(0, 0)], true)),
            (inst(2, 0), node(2, &[inst(1, 0), inst(0, 0)], true)),
            (inst(3, 0), node(1, &[], true)),
        ];
        for (k, v) in items.iter() {
            g1.insert(*k, v.clone());
        }
        for (k, v) in items.iter().rev() {
            g2.insert(*k, v.clone());
        }
        assert_eq!(linearize(&g1), linearize(&g2));
    }
}
