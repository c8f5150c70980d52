//! Concrete reference implementations used to cross-check the symbolic
//! pipeline. Everything here works on plain integers.

use std::collections::{BTreeMap, BTreeSet};

use dsg_core::graph::{Graph, OpId, ValueId};
use dsg_core::remat::InstrumentedGraph;
use dsg_core::sim::{Binding, Method};
use dsg_core::symexpr::Env;

fn size(g: &Graph, v: ValueId, env: &Env) -> u64 {
    g.value_type(v).unwrap().size_expr().unwrap().evaluate(env).unwrap() as u64
}

fn elements(g: &Graph, v: ValueId, env: &Env) -> u64 {
    g.value_type(v)
        .unwrap()
        .num_elements_expr()
        .unwrap()
        .evaluate(env)
        .unwrap() as u64
}

fn freeable(g: &Graph, v: ValueId) -> bool {
    !g.is_source_value(v) && !g.is_output(v)
}

fn distinct_users(g: &Graph, v: ValueId) -> usize {
    g.ops()
        .iter()
        .filter(|op| op.kind.is_compute() && op.operands.contains(&v))
        .count()
}

fn sources(g: &Graph) -> Vec<ValueId> {
    g.ops()
        .iter()
        .filter(|op| op.kind.is_source())
        .map(|op| op.results[0].0)
        .collect()
}

/// Greedy list scheduler over integer impacts: minimum impact first, ties
/// broken by the oldest retired producer and then by op id. Only meaningful
/// for graphs without symbolic dims.
pub fn concrete_greedy(g: &Graph) -> Vec<OpId> {
    let env = Env::new();
    let sz = |v: ValueId| size(g, v, &env) as i128;
    let mut remaining: Vec<usize> = (0..g.num_values())
        .map(|i| distinct_users(g, ValueId(i as u32)))
        .collect();
    let mut pos: BTreeMap<OpId, usize> = BTreeMap::new();
    let mut done: BTreeSet<ValueId> = sources(g).into_iter().collect();
    let mut order = Vec::new();
    loop {
        let ready: Vec<OpId> = g
            .ops()
            .iter()
            .filter(|op| op.kind.is_compute() && !pos.contains_key(&op.id))
            .filter(|op| op.operands.iter().all(|v| done.contains(v)))
            .map(|op| op.id)
            .collect();
        if ready.is_empty() {
            return order;
        }
        let retired = |id: OpId| -> Vec<ValueId> {
            g.op(id)
                .operands
                .iter()
                .copied()
                .collect::<BTreeSet<_>>()
                .into_iter()
                .filter(|v| freeable(g, *v) && remaining[v.index()] == 1)
                .collect()
        };
        let impact = |id: OpId| sz(g.op(id).results[0].0) - retired(id).iter().map(|v| sz(*v)).sum::<i128>();
        let best = ready.iter().map(|id| impact(*id)).min().unwrap();
        let chosen = ready
            .iter()
            .copied()
            .filter(|id| impact(*id) == best)
            .min_by_key(|id| {
                let oldest = retired(*id)
                    .iter()
                    .map(|v| pos[&g.producer(*v).unwrap().id])
                    .min()
                    .unwrap_or(usize::MAX);
                (oldest, *id)
            })
            .unwrap();
        for v in g.op(chosen).operands.iter().collect::<BTreeSet<_>>() {
            remaining[v.index()] -= 1;
        }
        pos.insert(chosen, order.len());
        done.insert(g.op(chosen).results[0].0);
        order.push(chosen);
    }
}

/// Each planned value is evicted once, right after the first op at which it
/// is an eviction candidate, and regenerated on demand.
pub type EvictionPlan = BTreeMap<ValueId, Method>;

struct PlanRun<'a> {
    g: &'a Graph,
    inst: &'a InstrumentedGraph,
    env: &'a Env,
    resident: BTreeSet<ValueId>,
    evicted: BTreeMap<ValueId, Method>,
    pins: BTreeMap<ValueId, usize>,
    remaining: Vec<usize>,
    cur: u64,
    peak: u64,
}

impl PlanRun<'_> {
    fn alloc(&mut self, b: u64) {
        self.cur += b;
        self.peak = self.peak.max(self.cur);
    }

    fn dead(&self, v: ValueId) -> bool {
        freeable(self.g, v) && self.remaining[v.index()] == 0 && !self.pins.contains_key(&v)
    }

    fn release(&mut self, v: ValueId) {
        if self.resident.remove(&v) {
            self.cur -= size(self.g, v, self.env);
        }
    }

    fn pinned_leaves(&self, v: ValueId) -> Vec<ValueId> {
        let spec = self.inst.specs[&v].recompute.as_ref().unwrap();
        spec.leaves
            .iter()
            .copied()
            .filter(|l| !self.g.is_source_value(*l))
            .collect()
    }

    fn regen(&mut self, v: ValueId) -> Option<()> {
        if self.resident.contains(&v) {
            return Some(());
        }
        match self.evicted.remove(&v)? {
            Method::Reload => {
                self.alloc(size(self.g, v, self.env));
                self.resident.insert(v);
            }
            Method::Recompute => {
                let spec = self.inst.specs[&v].recompute.clone()?;
                for l in &spec.leaves {
                    if !self.g.is_source_value(*l) {
                        self.regen(*l)?;
                    }
                }
                let produced: BTreeSet<ValueId> = spec.ops.iter().map(|o| self.g.op(*o).results[0].0).collect();
                let mut uses: BTreeMap<ValueId, usize> = BTreeMap::new();
                for o in &spec.ops {
                    for x in self.g.op(*o).operands.iter().collect::<BTreeSet<_>>() {
                        if produced.contains(x) {
                            *uses.entry(*x).or_default() += 1;
                        }
                    }
                }
                for o in &spec.ops {
                    let r = self.g.op(*o).results[0].0;
                    self.alloc(size(self.g, r, self.env));
                    for x in self.g.op(*o).operands.iter().collect::<BTreeSet<_>>() {
                        if let Some(n) = uses.get_mut(x) {
                            *n -= 1;
                            if *n == 0 && *x != v {
                                self.cur -= size(self.g, *x, self.env);
                            }
                        }
                    }
                }
                self.resident.insert(v);
                for l in self.pinned_leaves(v) {
                    let n = self.pins.get_mut(&l).unwrap();
                    *n -= 1;
                    if *n == 0 {
                        self.pins.remove(&l);
                    }
                    if self.dead(l) {
                        self.release(l);
                    }
                }
            }
        }
        Some(())
    }

    fn evict(&mut self, v: ValueId, m: Method) -> Option<()> {
        if !self.resident.contains(&v) {
            return Some(());
        }
        if m == Method::Recompute {
            let spec = self.inst.specs[&v].recompute.as_ref()?;
            let ok = spec
                .leaves
                .iter()
                .all(|l| self.g.is_source_value(*l) || self.resident.contains(l) || self.evicted.contains_key(l));
            if !ok {
                return None;
            }
            for l in self.pinned_leaves(v) {
                *self.pins.entry(l).or_default() += 1;
            }
        }
        self.release(v);
        self.evicted.insert(v, m);
        Some(())
    }
}

/// Peak bytes when executing the schedule with `plan`, or `None` if the plan
/// cannot be carried out (a recompute whose leaves are already gone).
pub fn plan_peak(g: &Graph, inst: &InstrumentedGraph, binding: &Binding, plan: &EvictionPlan) -> Option<u64> {
    let env = binding.env();
    let mut first: BTreeMap<ValueId, usize> = BTreeMap::new();
    for point in &inst.evicts {
        for v in &point.candidates {
            first.entry(*v).or_insert(point.position);
        }
    }
    let mut run = PlanRun {
        g,
        inst,
        env,
        resident: BTreeSet::new(),
        evicted: BTreeMap::new(),
        pins: BTreeMap::new(),
        remaining: (0..g.num_values())
            .map(|i| distinct_users(g, ValueId(i as u32)))
            .collect(),
        cur: 0,
        peak: 0,
    };
    for v in sources(g) {
        run.alloc(size(g, v, env));
        run.resident.insert(v);
    }
    for (p, step) in inst.schedule.steps.iter().enumerate() {
        let op = g.op(step.op);
        let operands: BTreeSet<ValueId> = op.operands.iter().copied().collect();
        for v in &operands {
            run.regen(*v)?;
        }
        let r = op.results[0].0;
        run.alloc(size(g, r, env));
        run.resident.insert(r);
        for v in &operands {
            run.remaining[v.index()] -= 1;
            if run.dead(*v) {
                run.release(*v);
            }
        }
        if run.dead(r) {
            run.release(r);
        }
        for (v, m) in plan {
            if first.get(v) == Some(&p) {
                run.evict(*v, *m)?;
            }
        }
    }
    Some(run.peak)
}

/// Exhaustive search over every subset of eviction candidates and every
/// method for each. Returns the first plan that fits in `budget`.
pub fn feasible_plan(g: &Graph, inst: &InstrumentedGraph, binding: &Binding, budget: u64) -> Option<EvictionPlan> {
    let vals: Vec<ValueId> = inst
        .evicts
        .iter()
        .flat_map(|e| e.candidates.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let options: Vec<Vec<Option<Method>>> = vals
        .iter()
        .map(|v| {
            let mut o = vec![None, Some(Method::Reload)];
            if inst.specs.get(v).is_some_and(|s| s.recompute.is_some()) {
                o.push(Some(Method::Recompute));
            }
            o
        })
        .collect();
    let mut idx = vec![0usize; vals.len()];
    loop {
        let plan: EvictionPlan = vals
            .iter()
            .zip(&idx)
            .zip(&options)
            .filter_map(|((v, i), o)| o[*i].map(|m| (*v, m)))
            .collect();
        if plan_peak(g, inst, binding, &plan).is_some_and(|p| p <= budget) {
            return Some(plan);
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                return None;
            }
            idx[k] += 1;
            if idx[k] < options[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Elements that a recompute of `v` produces, summed over its subgraph.
pub fn recompute_elements(g: &Graph, inst: &InstrumentedGraph, binding: &Binding, v: ValueId) -> Option<u64> {
    let spec = inst.specs.get(&v)?.recompute.as_ref()?;
    Some(
        spec.ops
            .iter()
            .map(|o| elements(g, g.op(*o).results[0].0, binding.env()))
            .sum(),
    )
}
