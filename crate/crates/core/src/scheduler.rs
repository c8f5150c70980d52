//! Greedy list scheduling driven by symbolic memory impact.
//!
//! Source ops (parameters, constants) are resident before the first step and
//! are never scheduled or freed; the return op is not scheduled either.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::graph::{Graph, GraphError, OpId, ValueId};
use crate::shape::ShapeConstraintGraph;
use crate::symexpr::{compare, CompareResult, Env, ExprError, SymbolicExpr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("CyclicGraph: the graph contains a cycle")]
    CyclicGraph,
    #[error("InvalidOrder: {0}")]
    InvalidOrder(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

impl From<GraphError> for ScheduleError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::CyclicGraph => ScheduleError::CyclicGraph,
            GraphError::NotFound(v) => ScheduleError::InvalidOrder(format!("unknown value {v}")),
        }
    }
}

/// Distinct consuming compute ops per value, in op id order.
pub fn consumers(graph: &Graph) -> Vec<Vec<OpId>> {
    let mut out = vec![Vec::new(); graph.num_values()];
    for op in graph.ops() {
        if !op.kind.is_compute() {
            continue;
        }
        for v in op.operands.iter().collect::<BTreeSet<_>>() {
            if let Some(list) = out.get_mut(v.index()) {
                list.push(op.id);
            }
        }
    }
    out
}

/// Parameters, constants and graph outputs stay resident for the whole run.
pub fn is_freeable(graph: &Graph, v: ValueId) -> bool {
    !graph.is_source_value(v) && !graph.is_output(v)
}

/// Byte size of `v` as written in its declared type.
pub fn value_size(graph: &Graph, v: ValueId) -> Result<SymbolicExpr, ExprError> {
    graph.value_type(v).map_or(Ok(SymbolicExpr::zero()), |t| t.size_expr())
}

/// Compute ops in the graph's topological order.
pub fn program_order(graph: &Graph) -> Result<Vec<OpId>, ScheduleError> {
    Ok(graph
        .topo_order()?
        .into_iter()
        .filter(|id| graph.op(*id).kind.is_compute())
        .collect())
}

/// Liveness bookkeeping for a partial schedule.
#[derive(Clone, Debug)]
pub struct Liveness {
    remaining: Vec<usize>,
    last_use: Vec<Option<usize>>,
    position: Vec<Option<usize>>,
    freeable: Vec<bool>,
    scheduled: usize,
}

impl Liveness {
    pub fn new(graph: &Graph) -> Self {
        let users = consumers(graph);
        Liveness {
            remaining: users.iter().map(Vec::len).collect(),
            last_use: vec![None; graph.num_values()],
            position: vec![None; graph.ops().len()],
            freeable: (0..graph.num_values())
                .map(|i| is_freeable(graph, ValueId(i as u32)))
                .collect(),
            scheduled: 0,
        }
    }

    pub fn remaining_users(&self, v: ValueId) -> usize {
        self.remaining[v.index()]
    }

    /// Position of the latest scheduled user of `v`.
    pub fn last_use(&self, v: ValueId) -> Option<usize> {
        self.last_use[v.index()]
    }

    pub fn position(&self, op: OpId) -> Option<usize> {
        self.position[op.index()]
    }

    pub fn steps(&self) -> usize {
        self.scheduled
    }

    /// Freeable operands for which `op` is the last pending user.
    pub fn retired_by(&self, graph: &Graph, op: OpId) -> Vec<ValueId> {
        graph
            .op(op)
            .operands
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|v| self.freeable[v.index()] && self.remaining[v.index()] == 1)
            .collect()
    }

    /// Schedules `op`; returns (allocated, freed) values.
    fn record(&mut self, graph: &Graph, op: OpId) -> (Vec<ValueId>, Vec<ValueId>) {
        let pos = self.scheduled;
        let mut freed = self.retired_by(graph, op);
        for v in graph.op(op).operands.iter().collect::<BTreeSet<_>>() {
            self.remaining[v.index()] -= 1;
            self.last_use[v.index()] = Some(pos);
        }
        let alloc: Vec<ValueId> = graph.op(op).results.iter().map(|(v, _)| *v).collect();
        for v in &alloc {
            if self.remaining[v.index()] == 0 && self.freeable[v.index()] {
                freed.push(*v);
            }
        }
        self.position[op.index()] = Some(pos);
        self.scheduled += 1;
        (alloc, freed)
    }
}

/// Net memory change of scheduling an op. `raw` uses sizes as declared,
/// `canonical` is the same expression on the constraint basis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemImpact {
    pub raw: SymbolicExpr,
    pub canonical: SymbolicExpr,
}

/// Σ size(results) − Σ size(values the op retires).
pub fn mem_impact(
    graph: &Graph,
    op: OpId,
    liveness: &Liveness,
    constraints: &ShapeConstraintGraph,
) -> Result<MemImpact, ExprError> {
    let mut raw = SymbolicExpr::zero();
    for (v, _) in &graph.op(op).results {
        raw = raw.checked_add(&value_size(graph, *v)?)?;
    }
    for v in liveness.retired_by(graph, op) {
        raw = raw.checked_sub(&value_size(graph, v)?)?;
    }
    let canonical = constraints.canonicalize(&raw)?;
    Ok(MemImpact { raw, canonical })
}

/// Among `ready`, prefers the op retiring the value whose producer was
/// scheduled earliest; ops retiring nothing come last; then smallest id.
pub fn tie_break_lifetime(ready: &[OpId], graph: &Graph, liveness: &Liveness) -> OpId {
    let key = |op: OpId| {
        let oldest = liveness
            .retired_by(graph, op)
            .into_iter()
            .filter_map(|v| graph.producer(v).and_then(|p| liveness.position(p.id)))
            .min()
            .unwrap_or(usize::MAX);
        (oldest, op)
    };
    ready
        .iter()
        .copied()
        .min_by_key(|op| key(*op))
        .expect("tie_break_lifetime needs at least one ready op")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionRule {
    /// Only one op was ready.
    OnlyReady,
    /// One op was definitely smaller than every other ready op.
    DefiniteMinimum,
    /// Comparison could not single out an op.
    LifetimeTieBreak,
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionRule::OnlyReady => "only-ready",
            SelectionRule::DefiniteMinimum => "definite-minimum",
            SelectionRule::LifetimeTieBreak => "lifetime-tie-break",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    pub step: usize,
    pub ready: Vec<(OpId, MemImpact)>,
    pub chosen: OpId,
    pub rule: SelectionRule,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduleStep {
    pub op: OpId,
    pub alloc: Vec<ValueId>,
    pub free: Vec<ValueId>,
    /// Bytes allocated by this step, canonical.
    pub alloc_bytes: SymbolicExpr,
    /// Live bytes once the step's frees are applied, canonical.
    pub live_after: SymbolicExpr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    /// Values resident before the first step (parameters and constants).
    pub initial: Vec<ValueId>,
    pub initial_live: SymbolicExpr,
    pub steps: Vec<ScheduleStep>,
    /// Selection trace; empty for replayed orders.
    pub decisions: Vec<Decision>,
}

impl Schedule {
    /// Computes liveness for an arbitrary order of the graph's compute ops.
    pub fn replay(
        graph: &Graph,
        order: &[OpId],
        constraints: &ShapeConstraintGraph,
    ) -> Result<Schedule, ScheduleError> {
        let compute: BTreeSet<OpId> = graph
            .ops()
            .iter()
            .filter(|op| op.kind.is_compute())
            .map(|op| op.id)
            .collect();
        let mut available: BTreeSet<ValueId> = BTreeSet::new();
        let mut initial = Vec::new();
        let mut initial_live = SymbolicExpr::zero();
        for op in graph.ops().iter().filter(|op| op.kind.is_source()) {
            for (v, _) in &op.results {
                available.insert(*v);
                initial.push(*v);
                initial_live = initial_live.checked_add(&value_size(graph, *v)?)?;
            }
        }
        let initial_live = constraints.canonicalize(&initial_live)?;

        let mut seen = BTreeSet::new();
        let mut live = Liveness::new(graph);
        let mut current = initial_live.clone();
        let mut steps = Vec::with_capacity(order.len());
        for &id in order {
            if !compute.contains(&id) {
                return Err(ScheduleError::InvalidOrder(format!(
                    "op #{} is not a compute op of the graph",
                    id.0
                )));
            }
            if !seen.insert(id) {
                return Err(ScheduleError::InvalidOrder(format!("op #{} appears twice", id.0)));
            }
            if let Some(v) = graph.op(id).operands.iter().find(|v| !available.contains(v)) {
                return Err(ScheduleError::InvalidOrder(format!(
                    "op #{} uses {} before it is produced",
                    id.0,
                    graph.value_name(*v)
                )));
            }
            let (alloc, free) = live.record(graph, id);
            let mut alloc_bytes = SymbolicExpr::zero();
            for v in &alloc {
                available.insert(*v);
                alloc_bytes = alloc_bytes.checked_add(&value_size(graph, *v)?)?;
            }
            let mut freed_bytes = SymbolicExpr::zero();
            for v in &free {
                freed_bytes = freed_bytes.checked_add(&value_size(graph, *v)?)?;
            }
            let alloc_bytes = constraints.canonicalize(&alloc_bytes)?;
            let freed_bytes = constraints.canonicalize(&freed_bytes)?;
            current = current.checked_add(&alloc_bytes)?.checked_sub(&freed_bytes)?;
            steps.push(ScheduleStep {
                op: id,
                alloc,
                free,
                alloc_bytes,
                live_after: current.clone(),
            });
        }
        if seen.len() != compute.len() {
            return Err(ScheduleError::InvalidOrder(format!(
                "order covers {} of {} compute ops",
                seen.len(),
                compute.len()
            )));
        }
        Ok(Schedule {
            initial,
            initial_live,
            steps,
            decisions: Vec::new(),
        })
    }

    pub fn order(&self) -> Vec<OpId> {
        self.steps.iter().map(|s| s.op).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn position_of(&self, op: OpId) -> Option<usize> {
        self.steps.iter().position(|s| s.op == op)
    }

    pub fn live_before(&self, step: usize) -> &SymbolicExpr {
        match step {
            0 => &self.initial_live,
            i => &self.steps[i - 1].live_after,
        }
    }

    /// Resident values after each step.
    pub fn live_sets(&self) -> Vec<BTreeSet<ValueId>> {
        let mut live: BTreeSet<ValueId> = self.initial.iter().copied().collect();
        self.steps
            .iter()
            .map(|s| {
                live.extend(s.alloc.iter().copied());
                for v in &s.free {
                    live.remove(v);
                }
                live.clone()
            })
            .collect()
    }

    /// Concrete live bytes after each step.
    pub fn live_trajectory(&self, env: &Env) -> Result<Vec<i128>, ExprError> {
        self.steps.iter().map(|s| s.live_after.evaluate(env)).collect()
    }

    /// Max over steps of live bytes while the step's results and operands
    /// coexist, i.e. before its frees.
    pub fn peak_bytes(&self, env: &Env) -> Result<i128, ExprError> {
        let mut peak = self.initial_live.evaluate(env)?;
        for (i, s) in self.steps.iter().enumerate() {
            let during = self.live_before(i).evaluate(env)? + s.alloc_bytes.evaluate(env)?;
            peak = peak.max(during);
        }
        Ok(peak)
    }
}

/// Greedy scheduling: each step picks the ready op with the smallest memory
/// impact, falling back to [`tie_break_lifetime`] when the symbolic
/// comparison cannot establish a unique minimum.
pub fn schedule(graph: &Graph, constraints: &ShapeConstraintGraph) -> Result<Schedule, ScheduleError> {
    graph.topo_order()?;
    let users = consumers(graph);
    let mut pending: Vec<usize> = graph
        .ops()
        .iter()
        .map(|op| {
            op.operands
                .iter()
                .filter(|v| !graph.is_source_value(**v))
                .collect::<BTreeSet<_>>()
                .len()
        })
        .collect();
    let mut ready: BTreeSet<OpId> = graph
        .ops()
        .iter()
        .filter(|op| op.kind.is_compute() && pending[op.id.index()] == 0)
        .map(|op| op.id)
        .collect();

    let mut live = Liveness::new(graph);
    let mut order = Vec::new();
    let mut decisions = Vec::new();
    while !ready.is_empty() {
        let candidates: Vec<OpId> = ready.iter().copied().collect();
        let impacts = candidates
            .iter()
            .map(|op| Ok((*op, mem_impact(graph, *op, &live, constraints)?)))
            .collect::<Result<Vec<_>, ExprError>>()?;
        let (chosen, rule) = select(&impacts, graph, &live, constraints);
        decisions.push(Decision {
            step: order.len(),
            ready: impacts,
            chosen,
            rule,
        });
        ready.remove(&chosen);
        live.record(graph, chosen);
        order.push(chosen);
        for (v, _) in &graph.op(chosen).results {
            for user in &users[v.index()] {
                pending[user.index()] -= 1;
                if pending[user.index()] == 0 {
                    ready.insert(*user);
                }
            }
        }
    }
    let mut sched = Schedule::replay(graph, &order, constraints)?;
    sched.decisions = decisions;
    Ok(sched)
}

fn select(
    impacts: &[(OpId, MemImpact)],
    graph: &Graph,
    live: &Liveness,
    constraints: &ShapeConstraintGraph,
) -> (OpId, SelectionRule) {
    if impacts.len() == 1 {
        return (impacts[0].0, SelectionRule::OnlyReady);
    }
    // Ops not definitely larger than some other ready op.
    let minimal: Vec<OpId> = impacts
        .iter()
        .filter(|(a, ia)| {
            !impacts.iter().any(|(b, ib)| {
                a != b && compare(&ia.canonical, &ib.canonical, constraints) == CompareResult::DefinitelyGreater
            })
        })
        .map(|(op, _)| *op)
        .collect();
    if minimal.len() == 1 {
        (minimal[0], SelectionRule::DefiniteMinimum)
    } else {
        (
            tie_break_lifetime(&minimal, graph, live),
            SelectionRule::LifetimeTieBreak,
        )
    }
}
