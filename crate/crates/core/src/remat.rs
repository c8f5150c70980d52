//! Compile-time rematerialization: eviction candidates after every op,
//! recompute subgraph search, and regeneration guards before consumers.
//! Which branch actually runs is decided by the simulator.

use std::collections::{BTreeMap, BTreeSet};

use crate::graph::{Graph, OpId, ValueId};
use crate::scheduler::{consumers, value_size, Schedule};
use crate::shape::ShapeConstraintGraph;
use crate::symexpr::{compare, CompareResult, ExprError, SymbolicExpr};

/// Maximum number of cloned ops in one recompute subgraph.
pub const MAX_SUBGRAPH_OPS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecomputeSpec {
    /// Cloned producers in schedule order; the last one produces the target.
    pub ops: Vec<OpId>,
    /// Operands consumed by the subgraph but produced outside it.
    pub leaves: Vec<ValueId>,
    pub benefit: SymbolicExpr,
    /// Σ element counts of the subgraph results.
    pub cost: SymbolicExpr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchStep {
    pub absorbed: OpId,
    pub benefit: SymbolicExpr,
    pub accepted: bool,
}

/// Regeneration options for one candidate. Reload is always available.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegenSpec {
    pub target: ValueId,
    pub recompute: Option<RecomputeSpec>,
    pub trace: Vec<SearchStep>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvictPoint {
    /// Index of the op this point follows.
    pub position: usize,
    pub candidates: Vec<ValueId>,
}

/// Regeneration check for `value` right before the op at `position`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RegenGuard {
    pub position: usize,
    pub value: ValueId,
    pub consumer: OpId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstrumentedGraph {
    pub schedule: Schedule,
    /// One per schedule position.
    pub evicts: Vec<EvictPoint>,
    /// Sorted by (position, value).
    pub guards: Vec<RegenGuard>,
    pub specs: BTreeMap<ValueId, RegenSpec>,
}

impl InstrumentedGraph {
    pub fn guards_before(&self, position: usize) -> impl Iterator<Item = &RegenGuard> {
        self.guards.iter().filter(move |g| g.position == position)
    }
}

/// Values live after the op at `position` that may be evicted there.
pub fn enumerate_candidates(graph: &Graph, schedule: &Schedule, position: usize) -> Vec<ValueId> {
    let live = schedule.live_sets();
    candidates_from(graph, schedule, &live, position)
}

fn candidates_from(graph: &Graph, schedule: &Schedule, live: &[BTreeSet<ValueId>], position: usize) -> Vec<ValueId> {
    let Some(set) = live.get(position) else {
        return Vec::new();
    };
    let next: BTreeSet<ValueId> = schedule
        .steps
        .get(position + 1)
        .map(|s| graph.op(s.op).operands.iter().copied().collect())
        .unwrap_or_default();
    set.iter()
        .copied()
        .filter(|v| !graph.is_source_value(*v) && !graph.is_output(*v) && !next.contains(v))
        .collect()
}

/// Schedule position of the last consumer of each value.
fn last_uses(graph: &Graph, schedule: &Schedule) -> Vec<Option<usize>> {
    let pos: BTreeMap<OpId, usize> = schedule.order().into_iter().zip(0..).collect();
    consumers(graph)
        .iter()
        .map(|users| users.iter().filter_map(|u| pos.get(u).copied()).max())
        .collect()
}

/// Grows a recompute subgraph backward from the producer of `target`.
///
/// A leaf counts as resident when it is a parameter, constant or output, or
/// when it stays live at least as long as the target itself.
pub fn search_recompute_subgraph(
    graph: &Graph,
    target: ValueId,
    schedule: &Schedule,
    constraints: &ShapeConstraintGraph,
) -> Result<RegenSpec, ExprError> {
    let last = last_uses(graph, schedule);
    search_with(graph, target, schedule, constraints, &last)
}

fn search_with(
    graph: &Graph,
    target: ValueId,
    schedule: &Schedule,
    constraints: &ShapeConstraintGraph,
    last: &[Option<usize>],
) -> Result<RegenSpec, ExprError> {
    let mut spec = RegenSpec {
        target,
        recompute: None,
        trace: Vec::new(),
    };
    let Some(root) = graph.producer(target).filter(|p| p.kind.is_compute()) else {
        return Ok(spec);
    };
    let pos: BTreeMap<OpId, usize> = schedule.order().into_iter().zip(0..).collect();
    let target_last = last[target.index()];
    let resident = |v: ValueId| {
        graph.is_source_value(v)
            || graph.is_output(v)
            || matches!((last[v.index()], target_last), (Some(a), Some(b)) if a >= b)
    };
    let target_size = constraints.canonicalize(&value_size(graph, target)?)?;

    let mut ops: BTreeSet<OpId> = BTreeSet::new();
    let mut next = root.id;
    loop {
        ops.insert(next);
        let produced: BTreeSet<ValueId> = ops
            .iter()
            .flat_map(|o| graph.op(*o).results.iter().map(|(v, _)| *v))
            .collect();
        let leaves: BTreeSet<ValueId> = ops
            .iter()
            .flat_map(|o| graph.op(*o).operands.iter().copied())
            .filter(|v| !produced.contains(v))
            .collect();
        let mut benefit = target_size.clone();
        let mut largest: Option<(ValueId, SymbolicExpr)> = None;
        for v in leaves.iter().copied().filter(|v| !resident(*v)) {
            let size = constraints.canonicalize(&value_size(graph, v)?)?;
            benefit = benefit.checked_sub(&size)?;
            let bigger = match &largest {
                None => true,
                Some((_, best)) => compare(&size, best, constraints) == CompareResult::DefinitelyGreater,
            };
            if bigger {
                largest = Some((v, size));
            }
        }
        let accepted = compare(&benefit, &SymbolicExpr::zero(), constraints) == CompareResult::DefinitelyGreater;
        spec.trace.push(SearchStep {
            absorbed: next,
            benefit: benefit.clone(),
            accepted,
        });
        if accepted {
            let mut ordered: Vec<OpId> = ops.iter().copied().collect();
            ordered.sort_by_key(|o| pos.get(o).copied().unwrap_or(usize::MAX));
            let mut cost = SymbolicExpr::zero();
            for o in &ordered {
                for (_, ty) in &graph.op(*o).results {
                    cost = cost.checked_add(&ty.num_elements_expr()?)?;
                }
            }
            spec.recompute = Some(RecomputeSpec {
                ops: ordered,
                leaves: leaves.into_iter().collect(),
                benefit,
                cost: constraints.canonicalize(&cost)?,
            });
            return Ok(spec);
        }
        if ops.len() >= MAX_SUBGRAPH_OPS {
            return Ok(spec);
        }
        let producer = largest
            .and_then(|(v, _)| graph.producer(v))
            .filter(|p| p.kind.is_compute() && !ops.contains(&p.id));
        match producer {
            Some(p) => next = p.id,
            None => return Ok(spec),
        }
    }
}

/// Places an eviction point after every op and a regeneration guard before
/// every consumer that runs after the value's first eviction point.
pub fn instrument(
    graph: &Graph,
    schedule: &Schedule,
    constraints: &ShapeConstraintGraph,
) -> Result<InstrumentedGraph, ExprError> {
    let live = schedule.live_sets();
    let last = last_uses(graph, schedule);
    let mut evicts = Vec::with_capacity(schedule.len());
    let mut first_point: BTreeMap<ValueId, usize> = BTreeMap::new();
    for position in 0..schedule.len() {
        let candidates = candidates_from(graph, schedule, &live, position);
        for v in &candidates {
            first_point.entry(*v).or_insert(position);
        }
        evicts.push(EvictPoint { position, candidates });
    }
    let mut specs = BTreeMap::new();
    for v in first_point.keys() {
        specs.insert(*v, search_with(graph, *v, schedule, constraints, &last)?);
    }
    let users = consumers(graph);
    let pos: BTreeMap<OpId, usize> = schedule.order().into_iter().zip(0..).collect();
    let mut guards = Vec::new();
    for (v, first) in &first_point {
        for consumer in &users[v.index()] {
            if let Some(&p) = pos.get(consumer) {
                if p > *first {
                    guards.push(RegenGuard {
                        position: p,
                        value: *v,
                        consumer: *consumer,
                    });
                }
            }
        }
    }
    guards.sort();
    Ok(InstrumentedGraph {
        schedule: schedule.clone(),
        evicts,
        guards,
        specs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BinaryOp, DType, DimSize, GraphBuilder, OpKind, TensorType};
    use crate::scheduler::schedule;
    use crate::shape::derive_constraints;

    fn t(dims: &[u64]) -> TensorType {
        TensorType::new(dims.iter().map(|d| DimSize::Literal(*d)).collect(), DType::I8)
    }

    fn add() -> OpKind {
        OpKind::Elementwise(BinaryOp::Add)
    }

    #[test]
    fn only_parameters_live_gives_no_candidates() {
        let mut b = GraphBuilder::new("g");
        let a = b.parameter(t(&[4]));
        let x = b.add_op(add(), vec![a, a], t(&[4]));
        let g = b.finish(vec![x]);
        let c = derive_constraints(&g).unwrap();
        let s = schedule(&g, &c).unwrap();
        assert!(enumerate_candidates(&g, &s, 0).is_empty());
        let inst = instrument(&g, &s, &c).unwrap();
        assert_eq!(inst.evicts.len(), 1);
        assert!(inst.guards.is_empty());
    }

    #[test]
    fn three_later_consumers_get_three_guards() {
        // x is consumed by three ops scheduled after an unrelated op.
        let mut b = GraphBuilder::new("g");
        let a = b.parameter(t(&[4]));
        let x = b.add_op(add(), vec![a, a], t(&[4]));
        let y = b.add_op(add(), vec![a, a], t(&[4]));
        let u1 = b.add_op(add(), vec![x, y], t(&[4]));
        let u2 = b.add_op(add(), vec![x, u1], t(&[4]));
        let u3 = b.add_op(add(), vec![x, u2], t(&[4]));
        let g = b.finish(vec![u3]);
        let c = derive_constraints(&g).unwrap();
        let s = Schedule::replay(&g, &[OpId(1), OpId(2), OpId(3), OpId(4), OpId(5)], &c).unwrap();
        assert_eq!(enumerate_candidates(&g, &s, 0), vec![x]);
        let inst = instrument(&g, &s, &c).unwrap();
        let for_x: Vec<_> = inst.guards.iter().filter(|gd| gd.value == x).collect();
        assert_eq!(for_x.len(), 3);
        assert_eq!(inst.evicts.len(), 5);
    }

    #[test]
    fn recompute_accepted_when_leaves_resident() {
        let mut b = GraphBuilder::new("g");
        let a = b.parameter(t(&[64]));
        let r = b.add_op(OpKind::Broadcast, vec![a], t(&[64, 4]));
        let other = b.add_op(add(), vec![a, a], t(&[64]));
        let u = b.add_op(OpKind::Reduce { axis: 1 }, vec![r], t(&[64]));
        let z = b.add_op(add(), vec![u, other], t(&[64]));
        let g = b.finish(vec![z]);
        let c = derive_constraints(&g).unwrap();
        let s = schedule(&g, &c).unwrap();
        let spec = search_recompute_subgraph(&g, r, &s, &c).unwrap();
        let re = spec.recompute.unwrap();
        assert_eq!(re.ops, vec![OpId(1)]);
        assert_eq!(re.benefit.to_string(), "256");
        assert_eq!(re.cost.to_string(), "256");
    }
}
