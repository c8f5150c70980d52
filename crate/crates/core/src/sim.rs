//! Runtime simulator: binds symbols to integers, replays an instrumented
//! schedule, and decides evictions and regenerations under a byte budget.
//!
//! The memory model is the exact sum of resident tensor bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{Graph, OpId, ValueId};
use crate::remat::InstrumentedGraph;
use crate::scheduler::{consumers, is_freeable, Schedule};
use crate::shape::ShapeConstraintGraph;
use crate::symexpr::{Env, ExprError, Symbol};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("UnboundSymbol: no value given for basis symbol @{0}")]
    UnboundSymbol(Symbol),
    #[error("UnknownSymbol: @{0} does not occur in the graph")]
    UnknownSymbol(Symbol),
    #[error("InconsistentBinding: {0}")]
    InconsistentBinding(String),
    #[error("DegenerateDim: @{0} = {1}, dims must be >= 1")]
    DegenerateDim(Symbol, i128),
    #[error("InvalidCostModel: rates must be positive and finite")]
    InvalidCostModel,
    #[error("InvalidBudget: the budget must be positive")]
    InvalidBudget,
    #[error("NoCandidate: no resident eviction candidate")]
    NoCandidate,
    #[error("InternalInvariantViolation: {0}")]
    InternalInvariantViolation(String),
    #[error("Overflow: byte count does not fit in 64 bits")]
    Overflow,
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Concrete values for every symbol of a constraint system.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Binding {
    env: Env,
}

impl Binding {
    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn get(&self, s: Symbol) -> Option<i64> {
        self.env.get(&s).copied()
    }
}

/// Checks `raw` against the constraints and fills in derived symbols.
///
/// Raw values may include derived symbols as long as they agree with the
/// substitution map.
pub fn bind(constraints: &ShapeConstraintGraph, raw: &BTreeMap<Symbol, i64>) -> Result<Binding, SimError> {
    for (s, v) in raw {
        if *v < 1 {
            return Err(SimError::DegenerateDim(*s, *v as i128));
        }
    }
    for s in raw.keys() {
        if !constraints.symbols().contains(s) {
            return Err(SimError::UnknownSymbol(*s));
        }
    }
    let mut env = Env::new();
    for s in constraints.basis_symbols() {
        match raw.get(&s) {
            Some(v) => {
                env.insert(s, *v);
            }
            None => return Err(SimError::UnboundSymbol(s)),
        }
    }
    for (s, e) in constraints.substitutions() {
        let v = e.evaluate(&env)?;
        if v < 1 {
            return Err(SimError::DegenerateDim(*s, v));
        }
        if let Some(given) = raw.get(s) {
            if *given as i128 != v {
                return Err(SimError::InconsistentBinding(format!(
                    "@{s} = {given}, but the constraints give {} = {v}",
                    e.to_ir_string()
                )));
            }
        }
        env.insert(*s, i64::try_from(v).map_err(|_| SimError::Overflow)?);
    }
    for eq in constraints.equalities() {
        let (l, r) = (eq.lhs.evaluate(&env)?, eq.rhs.evaluate(&env)?);
        if l != r {
            return Err(SimError::InconsistentBinding(format!(
                "{} = {} evaluates to {l} != {r}",
                eq.lhs.to_ir_string(),
                eq.rhs.to_ir_string()
            )));
        }
    }
    Ok(Binding { env })
}

/// Modeled regeneration cost: `bytes / reload_rate` for a reload,
/// `elements / compute_rate` for a recompute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostModel {
    pub reload_rate: f64,
    pub compute_rate: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            reload_rate: 16.0,
            compute_rate: 64.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |r: f64| r.is_finite() && r > 0.0;
        if ok(self.reload_rate) && ok(self.compute_rate) {
            Ok(())
        } else {
            Err(SimError::InvalidCostModel)
        }
    }

    pub fn reload_cost(&self, bytes: u64) -> f64 {
        bytes as f64 / self.reload_rate
    }

    pub fn recompute_cost(&self, elements: u64) -> f64 {
        elements as f64 / self.compute_rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Reload,
    Recompute,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Reload => "reload",
            Method::Recompute => "recompute",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Alloc,
    Free,
    Evict,
    Reload,
    Recompute,
}

impl EventKind {
    /// Sign of the event's effect on live bytes.
    pub fn adds_bytes(self) -> bool {
        matches!(self, EventKind::Alloc | EventKind::Reload | EventKind::Recompute)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub step: usize,
    pub kind: EventKind,
    pub value: String,
    #[serde(skip)]
    pub id: ValueId,
    pub bytes: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub binding: BTreeMap<String, i64>,
    /// `None` means unlimited.
    pub budget: Option<u64>,
    pub schedule_length: usize,
    pub peak_bytes: u64,
    pub success: bool,
    pub events: Vec<Event>,
    pub total_regen_cost: f64,
}

impl SimReport {
    pub fn evictions(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Evict)
    }

    /// Peak obtained by applying the events in order.
    pub fn replayed_peak(&self) -> u64 {
        let (mut cur, mut peak) = (0u64, 0u64);
        for e in &self.events {
            if e.kind.adds_bytes() {
                cur += e.bytes;
                peak = peak.max(cur);
            } else {
                cur -= e.bytes;
            }
        }
        peak
    }
}

/// Concrete byte size of every value under `binding`.
pub fn value_bytes(graph: &Graph, binding: &Binding) -> Result<Vec<u64>, SimError> {
    (0..graph.num_values())
        .map(|i| {
            let v = ValueId(i as u32);
            match graph.value_type(v) {
                Some(t) => to_u64(t.size_expr()?.evaluate(binding.env())?),
                None => Ok(0),
            }
        })
        .collect()
}

fn value_elements(graph: &Graph, binding: &Binding) -> Result<Vec<u64>, SimError> {
    (0..graph.num_values())
        .map(|i| match graph.value_type(ValueId(i as u32)) {
            Some(t) => to_u64(t.num_elements_expr()?.evaluate(binding.env())?),
            None => Ok(0),
        })
        .collect()
}

fn to_u64(v: i128) -> Result<u64, SimError> {
    u64::try_from(v).map_err(|_| SimError::Overflow)
}

fn binding_names(binding: &Binding) -> BTreeMap<String, i64> {
    binding.env().iter().map(|(s, v)| (s.to_string(), *v)).collect()
}

/// A resident eviction candidate as seen by the policy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidateState {
    pub value: ValueId,
    pub bytes: u64,
    /// Σ subgraph result elements when recompute is available right now.
    pub recompute_elements: Option<u64>,
}

/// Picks the (value, method) with the best freed-bytes-per-cost score.
/// Ties: larger bytes, then smaller value id; within one candidate, reload.
pub fn evict_policy(candidates: &[CandidateState], cost: &CostModel) -> Result<(ValueId, Method), SimError> {
    let mut best: Option<(f64, u64, ValueId, Method)> = None;
    for c in candidates {
        let mut score = c.bytes as f64 / cost.reload_cost(c.bytes);
        let mut method = Method::Reload;
        if let Some(elements) = c.recompute_elements {
            let s = c.bytes as f64 / cost.recompute_cost(elements);
            if s > score {
                score = s;
                method = Method::Recompute;
            }
        }
        let better = match best {
            None => true,
            Some((bs, bb, bv, _)) => score > bs || (score == bs && (c.bytes > bb || (c.bytes == bb && c.value < bv))),
        };
        if better {
            best = Some((score, c.bytes, c.value, method));
        }
    }
    best.map(|(_, _, v, m)| (v, m)).ok_or(SimError::NoCandidate)
}

/// Event stream of the schedule with no instrumentation at all.
pub fn replay_plain(graph: &Graph, schedule: &Schedule, binding: &Binding) -> Result<SimReport, SimError> {
    let bytes = value_bytes(graph, binding)?;
    let mut events = Vec::new();
    let mut cur = 0u64;
    let mut peak = 0u64;
    let mut push = |events: &mut Vec<Event>, step, kind, v: ValueId| {
        let b = bytes[v.index()];
        if kind == EventKind::Alloc {
            cur += b;
            peak = peak.max(cur);
        } else {
            cur -= b;
        }
        events.push(Event {
            step,
            kind,
            value: graph.value_name(v),
            id: v,
            bytes: b,
            method: None,
            cost: None,
        });
    };
    for v in &schedule.initial {
        push(&mut events, 0, EventKind::Alloc, *v);
    }
    for (p, s) in schedule.steps.iter().enumerate() {
        for v in &s.alloc {
            push(&mut events, p, EventKind::Alloc, *v);
        }
        for v in &s.free {
            push(&mut events, p, EventKind::Free, *v);
        }
    }
    Ok(SimReport {
        binding: binding_names(binding),
        budget: None,
        schedule_length: schedule.len(),
        peak_bytes: peak,
        success: true,
        events,
        total_regen_cost: 0.0,
    })
}

/// Replays `inst` under `binding`. With a budget, eviction points fire when
/// the next op's allocation would overflow it. Running out of candidates is
/// reported through `success`, not as an error.
pub fn simulate(
    graph: &Graph,
    inst: &InstrumentedGraph,
    binding: &Binding,
    budget: Option<u64>,
    cost: &CostModel,
) -> Result<SimReport, SimError> {
    if budget == Some(0) {
        return Err(SimError::InvalidBudget);
    }
    cost.validate()?;
    let mut run = Run {
        graph,
        inst,
        cost: *cost,
        bytes: value_bytes(graph, binding)?,
        elements: value_elements(graph, binding)?,
        remaining: consumers(graph).iter().map(Vec::len).collect(),
        freeable: (0..graph.num_values())
            .map(|i| is_freeable(graph, ValueId(i as u32)))
            .collect(),
        resident: BTreeMap::new(),
        evicted: BTreeMap::new(),
        pins: BTreeMap::new(),
        current: 0,
        peak: 0,
        events: Vec::new(),
        total_cost: 0.0,
    };
    run.execute(budget)?;
    Ok(SimReport {
        binding: binding_names(binding),
        budget,
        schedule_length: inst.schedule.len(),
        peak_bytes: run.peak,
        success: budget.is_none_or(|b| run.peak <= b),
        events: run.events,
        total_regen_cost: run.total_cost,
    })
}

struct Run<'a> {
    graph: &'a Graph,
    inst: &'a InstrumentedGraph,
    cost: CostModel,
    bytes: Vec<u64>,
    elements: Vec<u64>,
    remaining: Vec<usize>,
    freeable: Vec<bool>,
    resident: BTreeMap<ValueId, u64>,
    evicted: BTreeMap<ValueId, Method>,
    /// Pin counts held by values evicted for recompute on their leaves.
    pins: BTreeMap<ValueId, usize>,
    current: u64,
    peak: u64,
    events: Vec<Event>,
    total_cost: f64,
}

fn violation(msg: String) -> SimError {
    SimError::InternalInvariantViolation(msg)
}

impl Run<'_> {
    fn event(
        &mut self,
        step: usize,
        kind: EventKind,
        v: ValueId,
        bytes: u64,
        method: Option<Method>,
        cost: Option<f64>,
    ) {
        if kind.adds_bytes() {
            self.current += bytes;
            self.peak = self.peak.max(self.current);
        } else {
            self.current -= bytes;
        }
        self.events.push(Event {
            step,
            kind,
            value: self.graph.value_name(v),
            id: v,
            bytes,
            method,
            cost,
        });
    }

    fn make_resident(&mut self, step: usize, kind: EventKind, v: ValueId, method: Option<Method>, cost: Option<f64>) {
        let b = self.bytes[v.index()];
        self.resident.insert(v, b);
        self.event(step, kind, v, b, method, cost);
    }

    fn free(&mut self, step: usize, v: ValueId) {
        if let Some(b) = self.resident.remove(&v) {
            self.event(step, EventKind::Free, v, b, None, None);
        }
    }

    fn is_dead(&self, v: ValueId) -> bool {
        self.freeable[v.index()] && self.remaining[v.index()] == 0 && self.pins.get(&v).copied().unwrap_or(0) == 0
    }

    fn execute(&mut self, budget: Option<u64>) -> Result<(), SimError> {
        let sched = &self.inst.schedule;
        for v in &sched.initial {
            self.make_resident(0, EventKind::Alloc, *v, None, None);
        }
        for (p, step) in sched.steps.iter().enumerate() {
            let guarded: Vec<ValueId> = self.inst.guards_before(p).map(|g| g.value).collect();
            for v in guarded {
                self.regenerate(p, v, &mut Vec::new())?;
            }
            let op = self.graph.op(step.op);
            if let Some(v) = op.operands.iter().find(|v| !self.resident.contains_key(v)) {
                return Err(violation(format!(
                    "operand {} of op #{} is not resident",
                    self.graph.value_name(*v),
                    op.id.0
                )));
            }
            for (v, _) in &op.results {
                self.make_resident(p, EventKind::Alloc, *v, None, None);
            }
            let operands: BTreeSet<ValueId> = op.operands.iter().copied().collect();
            for v in operands {
                self.remaining[v.index()] -= 1;
                if self.is_dead(v) {
                    self.free(p, v);
                }
            }
            for (v, _) in &op.results {
                if self.is_dead(*v) {
                    self.free(p, *v);
                }
            }
            if let (Some(limit), Some(next)) = (budget, sched.steps.get(p + 1)) {
                self.evict_until_fits(p, next.op, limit)?;
            }
            debug_assert_eq!(self.current, self.resident.values().sum::<u64>());
            if self.current != self.resident.values().sum::<u64>() {
                return Err(violation(format!("live bytes drifted at step {p}")));
            }
        }
        Ok(())
    }

    fn projected(&self, next: OpId) -> u64 {
        let op = self.graph.op(next);
        let results: u64 = op.results.iter().map(|(v, _)| self.bytes[v.index()]).sum();
        let regen: u64 = op
            .operands
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|v| self.evicted.contains_key(v))
            .map(|v| self.bytes[v.index()])
            .sum();
        self.current + results + regen
    }

    fn recompute_available(&self, v: ValueId) -> Option<u64> {
        let spec = self.inst.specs.get(&v)?.recompute.as_ref()?;
        let leaves_ok = spec
            .leaves
            .iter()
            .all(|l| self.graph.is_source_value(*l) || self.resident.contains_key(l) || self.evicted.contains_key(l));
        if !leaves_ok {
            return None;
        }
        Some(
            spec.ops
                .iter()
                .flat_map(|o| self.graph.op(*o).results.iter().map(|(r, _)| self.elements[r.index()]))
                .sum(),
        )
    }

    fn evict_until_fits(&mut self, p: usize, next: OpId, limit: u64) -> Result<(), SimError> {
        while self.projected(next) > limit {
            let candidates: Vec<CandidateState> = self.inst.evicts[p]
                .candidates
                .iter()
                .filter(|v| self.resident.contains_key(v))
                .map(|v| CandidateState {
                    value: *v,
                    bytes: self.bytes[v.index()],
                    recompute_elements: self.recompute_available(*v),
                })
                .collect();
            let (v, method) = match evict_policy(&candidates, &self.cost) {
                Ok(choice) => choice,
                Err(SimError::NoCandidate) => return Ok(()),
                Err(e) => return Err(e),
            };
            let b = self.resident.remove(&v).unwrap_or(0);
            self.event(p, EventKind::Evict, v, b, Some(method), None);
            self.evicted.insert(v, method);
            if method == Method::Recompute {
                for l in self.leaves_to_pin(v) {
                    *self.pins.entry(l).or_default() += 1;
                }
            }
        }
        Ok(())
    }

    fn leaves_to_pin(&self, v: ValueId) -> Vec<ValueId> {
        self.inst
            .specs
            .get(&v)
            .and_then(|s| s.recompute.as_ref())
            .map(|r| {
                r.leaves
                    .iter()
                    .copied()
                    .filter(|l| !self.graph.is_source_value(*l))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Depth-first regeneration of `v` and any evicted recompute leaves.
    fn regenerate(&mut self, p: usize, v: ValueId, stack: &mut Vec<ValueId>) -> Result<(), SimError> {
        if self.resident.contains_key(&v) {
            return Ok(());
        }
        if stack.contains(&v) {
            return Err(violation(format!(
                "cyclic regeneration of {}",
                self.graph.value_name(v)
            )));
        }
        let Some(method) = self.evicted.remove(&v) else {
            return Err(violation(format!(
                "{} is neither resident nor evicted",
                self.graph.value_name(v)
            )));
        };
        match method {
            Method::Reload => {
                let c = self.cost.reload_cost(self.bytes[v.index()]);
                self.total_cost += c;
                self.make_resident(p, EventKind::Reload, v, Some(Method::Reload), Some(c));
            }
            Method::Recompute => {
                let spec = self
                    .inst
                    .specs
                    .get(&v)
                    .and_then(|s| s.recompute.clone())
                    .ok_or_else(|| violation(format!("no recompute subgraph for {}", self.graph.value_name(v))))?;
                stack.push(v);
                for l in &spec.leaves {
                    if !self.graph.is_source_value(*l) {
                        self.regenerate(p, *l, stack)?;
                    }
                }
                stack.pop();
                self.replay_subgraph(p, v, &spec.ops)?;
                for l in self.leaves_to_pin(v) {
                    if let Some(n) = self.pins.get_mut(&l) {
                        *n -= 1;
                        if *n == 0 {
                            self.pins.remove(&l);
                        }
                    }
                    if self.is_dead(l) {
                        self.free(p, l);
                    }
                }
            }
        }
        Ok(())
    }

    /// Runs cloned ops; intermediates are transient and freed as soon as
    /// no later subgraph op needs them.
    fn replay_subgraph(&mut self, p: usize, target: ValueId, ops: &[OpId]) -> Result<(), SimError> {
        let mut internal_uses: BTreeMap<ValueId, usize> = BTreeMap::new();
        let produced: BTreeSet<ValueId> = ops
            .iter()
            .flat_map(|o| self.graph.op(*o).results.iter().map(|(v, _)| *v))
            .collect();
        for o in ops {
            for v in self.graph.op(*o).operands.iter().collect::<BTreeSet<_>>() {
                if produced.contains(v) {
                    *internal_uses.entry(*v).or_default() += 1;
                }
            }
        }
        for o in ops {
            let op = self.graph.op(*o);
            for v in op.operands.iter().filter(|v| !produced.contains(v)) {
                if !self.resident.contains_key(v) {
                    return Err(violation(format!(
                        "recompute leaf {} is not resident",
                        self.graph.value_name(*v)
                    )));
                }
            }
            for (r, _) in &op.results {
                let c = self.cost.recompute_cost(self.elements[r.index()]);
                self.total_cost += c;
                if *r == target {
                    self.make_resident(p, EventKind::Recompute, *r, Some(Method::Recompute), Some(c));
                } else {
                    let b = self.bytes[r.index()];
                    self.event(p, EventKind::Recompute, *r, b, Some(Method::Recompute), Some(c));
                }
            }
            for v in op.operands.iter().collect::<BTreeSet<_>>() {
                if let Some(n) = internal_uses.get_mut(v) {
                    *n -= 1;
                    if *n == 0 && *v != target {
                        let b = self.bytes[v.index()];
                        self.event(p, EventKind::Free, *v, b, None, None);
                    }
                }
            }
        }
        Ok(())
    }
}
