use std::collections::{BTreeMap, BTreeSet};

use dsg_core::graph::{Graph, OpId, ValueId};
use dsg_core::remat::{enumerate_candidates, instrument, search_recompute_subgraph, InstrumentedGraph};
use dsg_core::scheduler::{schedule, Schedule};
use dsg_core::shape::{derive_constraints, ShapeConstraintGraph};
use dsg_core::sim::{
    bind, evict_policy, replay_plain, simulate, value_bytes, Binding, CandidateState, CostModel, EventKind, Method,
    SimReport,
};
use dsg_core::symexpr::{compare, CompareResult, Symbol, SymbolicExpr};
use dsg_core::textio::parse;
use dsg_testgen::oracle::{feasible_plan, plan_peak};
use dsg_testgen::{activation_graph, random_graph, random_valid_binding, GenConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> Graph {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reshape_chain.dsg")).unwrap();
    parse(&text).unwrap()
}

struct Case {
    g: Graph,
    c: ShapeConstraintGraph,
    s: Schedule,
    inst: InstrumentedGraph,
}

fn case(g: Graph) -> Case {
    let c = derive_constraints(&g).unwrap();
    let s = schedule(&g, &c).unwrap();
    let inst = instrument(&g, &s, &c).unwrap();
    Case { g, c, s, inst }
}

fn gen_case(seed: u64, max_ops: usize) -> Case {
    case(random_graph(
        &mut ChaCha8Rng::seed_from_u64(seed),
        &GenConfig::symbolic(1..=max_ops),
    ))
}

fn binding_for(c: &ShapeConstraintGraph, seed: u64) -> Option<Binding> {
    random_valid_binding(&mut ChaCha8Rng::seed_from_u64(seed), c, 1..=8)
}

/// Resident values after each step, by replaying users counts directly.
fn brute_force_live(g: &Graph, order: &[OpId]) -> Vec<BTreeSet<ValueId>> {
    let mut live: BTreeSet<ValueId> = g
        .ops()
        .iter()
        .filter(|op| op.kind.is_source())
        .map(|op| op.results[0].0)
        .collect();
    let mut out = Vec::new();
    for (i, id) in order.iter().enumerate() {
        live.insert(g.op(*id).results[0].0);
        let later: BTreeSet<ValueId> = order[i + 1..].iter().flat_map(|o| g.op(*o).operands.clone()).collect();
        live.retain(|v| g.is_source_value(*v) || g.is_output(*v) || later.contains(v));
        out.push(live.clone());
    }
    out
}

fn name(g: &Graph, v: &str) -> ValueId {
    g.value_by_name(v).unwrap()
}

#[test]
fn fixture_recompute_trace_for_value_4() {
    let Case { g, c, s, .. } = case(fixture());
    let spec = search_recompute_subgraph(&g, name(&g, "4"), &s, &c).unwrap();
    let trace: Vec<(String, bool)> = spec.trace.iter().map(|t| (t.benefit.to_string(), t.accepted)).collect();
    assert_eq!(
        trace,
        vec![
            ("-11007*S1".to_string(), false),
            ("-11*S1".to_string(), false),
            ("1*S1".to_string(), true)
        ]
    );
    let re = spec.recompute.unwrap();
    let produced: Vec<ValueId> = re.ops.iter().map(|o| g.op(*o).results[0].0).collect();
    assert_eq!(produced, vec![name(&g, "2"), name(&g, "3"), name(&g, "4")]);
    assert_eq!(re.leaves, vec![name(&g, "0"), name(&g, "w")]);
    assert_eq!(re.cost.to_string(), "11021*S1");
}

#[test]
fn fixture_instrumentation_shape() {
    let Case { g, s, inst, .. } = case(fixture());
    assert_eq!(inst.evicts.len(), s.len());
    // %4 becomes a candidate right after it is produced.
    let after_4 = s.position_of(g.producer(name(&g, "4")).unwrap().id).unwrap();
    assert!(enumerate_candidates(&g, &s, after_4).contains(&name(&g, "4")));
    // %1 has two later consumers (%5 and %13), both guarded once.
    let one = name(&g, "1");
    let guards: Vec<_> = inst.guards.iter().filter(|gd| gd.value == one).collect();
    let first = inst.evicts.iter().position(|e| e.candidates.contains(&one)).unwrap();
    let later_users: Vec<OpId> = g
        .users(one)
        .unwrap()
        .into_iter()
        .filter(|u| g.op(*u).kind.is_compute() && s.position_of(*u).unwrap() > first)
        .collect();
    assert_eq!(guards.len(), later_users.len());
}

const SINGLE_EVICTION: &str = "
graph single(%0: tensor<[@S0]:i8>, %w: tensor<[12, 11008]:i8>, %x: tensor<[@S1, 12288]:i8>) {
  %2 = dynamic_reshape(%0) : tensor<[@S1, 12]:i8>
  %3 = dot(%2, %w) : tensor<[@S1, 11008]:i8>
  %4 = reduce(%3, axis=1) : tensor<[@S1]:i8>
  %6 = mul(%x, %x) : tensor<[@S1, 12288]:i8>
  %7 = reduce(%6, axis=0) : tensor<[12288]:i8>
  %8 = reduce(%7, axis=0) : tensor<[]:i8>
  %9 = broadcast(%8) : tensor<[@S1]:i8>
  %10 = mul(%9, %4) : tensor<[@S1]:i8>
  return %10
}";

#[test]
fn budget_just_below_peak_evicts_value_4_once() {
    let Case { g, c, s, inst } = case(parse(SINGLE_EVICTION).unwrap());
    let four = name(&g, "4");
    assert!(inst.specs[&four].recompute.is_some());
    // Reload is made expensive so that recompute scores higher.
    let cost = CostModel {
        reload_rate: 0.001,
        compute_rate: 64.0,
    };
    for s1 in [1i64, 16, 256, 4096] {
        let b = bind(&c, &[(Symbol(1), s1)].into()).unwrap();
        let plain = replay_plain(&g, &s, &b).unwrap();
        let budget = plain.peak_bytes - value_bytes(&g, &b).unwrap()[four.index()];
        let rep = simulate(&g, &inst, &b, Some(budget), &cost).unwrap();
        let ev: Vec<_> = rep.evictions().collect();
        assert_eq!(ev.len(), 1, "S1={s1}");
        assert_eq!((ev[0].id, ev[0].method), (four, Some(Method::Recompute)));
        assert!(rep.success);
        let replays = rep.events.iter().filter(|e| e.kind == EventKind::Recompute).count();
        assert_eq!(replays, 3);
    }
}

#[test]
fn fixture_budget_sweep_is_monotone() {
    let Case { g, c, s, inst } = case(fixture());
    for s1 in [1i64, 16, 256] {
        let b = bind(&c, &[(Symbol(1), s1)].into()).unwrap();
        let peak = replay_plain(&g, &s, &b).unwrap().peak_bytes;
        let mut seen_success = false;
        for pct in 40..=100 {
            let rep = simulate(&g, &inst, &b, Some(peak * pct / 100), &CostModel::default()).unwrap();
            assert!(!seen_success || rep.success, "S1={s1} budget {pct}%");
            seen_success |= rep.success;
        }
        assert!(seen_success);
    }
}

fn sim_ok(cs: &Case, b: &Binding, budget: Option<u64>, cost: &CostModel) -> SimReport {
    simulate(&cs.g, &cs.inst, b, budget, cost).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn candidates_are_live_and_evictable(seed in any::<u64>()) {
        let cs = gen_case(seed, 12);
        let live = brute_force_live(&cs.g, &cs.s.order());
        prop_assert_eq!(cs.inst.evicts.len(), cs.s.len());
        for (p, point) in cs.inst.evicts.iter().enumerate() {
            prop_assert_eq!(&point.candidates, &enumerate_candidates(&cs.g, &cs.s, p));
            let next: BTreeSet<ValueId> = cs.s.steps.get(p + 1).map(|st| cs.g.op(st.op).operands.iter().copied().collect()).unwrap_or_default();
            for v in &point.candidates {
                prop_assert!(live[p].contains(v));
                prop_assert!(!cs.g.is_source_value(*v) && !cs.g.is_output(*v) && !next.contains(v));
            }
            prop_assert!(point.candidates.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn every_later_consumer_is_guarded_once(seed in any::<u64>()) {
        let cs = gen_case(seed, 12);
        let mut first: BTreeMap<ValueId, usize> = BTreeMap::new();
        for point in &cs.inst.evicts {
            for v in &point.candidates {
                first.entry(*v).or_insert(point.position);
            }
        }
        let mut expected = BTreeSet::new();
        for (v, p) in &first {
            for (q, st) in cs.s.steps.iter().enumerate() {
                if q > *p && cs.g.op(st.op).operands.contains(v) {
                    expected.insert((q, *v));
                }
            }
        }
        let actual: Vec<(usize, ValueId)> = cs.inst.guards.iter().map(|gd| (gd.position, gd.value)).collect();
        prop_assert_eq!(actual.len(), expected.len());
        prop_assert_eq!(actual.into_iter().collect::<BTreeSet<_>>(), expected);
    }

    #[test]
    fn accepted_subgraphs_rebuild_their_target(seed in any::<u64>(), bseed in any::<u64>()) {
        let cs = gen_case(seed, 12);
        let b = binding_for(&cs.c, bseed);
        let pos: BTreeMap<OpId, usize> = cs.s.order().into_iter().zip(0..).collect();
        for (v, spec) in &cs.inst.specs {
            let Some(re) = &spec.recompute else { continue };
            prop_assert_eq!(compare(&re.benefit, &SymbolicExpr::zero(), &cs.c), CompareResult::DefinitelyGreater);
            prop_assert!(re.ops.len() <= 16);
            prop_assert_eq!(cs.g.op(*re.ops.last().unwrap()).results[0].0, *v);
            let produced: BTreeSet<ValueId> = re.ops.iter().map(|o| cs.g.op(*o).results[0].0).collect();
            for o in &re.ops {
                for operand in &cs.g.op(*o).operands {
                    prop_assert!(produced.contains(operand) || re.leaves.contains(operand));
                }
            }
            prop_assert!(re.ops.windows(2).all(|w| pos[&w[0]] < pos[&w[1]]));
            if let Some(b) = &b {
                // Realized benefit: target bytes minus bytes of leaves that
                // die before the target's last use.
                let bytes = value_bytes(&cs.g, b).unwrap();
                let last_use = |x: ValueId| cs.g.users(x).unwrap().into_iter().filter_map(|u| pos.get(&u).copied()).max();
                let pinned: u64 = re
                    .leaves
                    .iter()
                    .filter(|l| !cs.g.is_source_value(**l) && !cs.g.is_output(**l) && last_use(**l) < last_use(*v))
                    .map(|l| bytes[l.index()])
                    .sum();
                prop_assert!(bytes[v.index()] > pinned);
                prop_assert_eq!(re.benefit.evaluate(b.env()).unwrap(), bytes[v.index()] as i128 - pinned as i128);
            }
        }
    }

    #[test]
    fn unlimited_budget_reproduces_plain_replay(seed in any::<u64>(), bseed in any::<u64>()) {
        let cs = gen_case(seed, 12);
        let b = binding_for(&cs.c, bseed);
        prop_assume!(b.is_some());
        let b = b.unwrap();
        let plain = replay_plain(&cs.g, &cs.s, &b).unwrap();
        let rep = sim_ok(&cs, &b, None, &CostModel::default());
        prop_assert_eq!(&rep.events, &plain.events);
        prop_assert_eq!(rep.peak_bytes, cs.s.peak_bytes(b.env()).unwrap() as u64);
    }

    #[test]
    fn simulation_invariants_under_pressure(seed in any::<u64>(), bseed in any::<u64>(), pct in 30u64..=100, rr in 1.0f64..64.0, cr in 1.0f64..256.0) {
        let cs = gen_case(seed, 10);
        let b = binding_for(&cs.c, bseed);
        prop_assume!(b.is_some());
        let b = b.unwrap();
        let cost = CostModel { reload_rate: rr, compute_rate: cr };
        let peak = replay_plain(&cs.g, &cs.s, &b).unwrap().peak_bytes;
        let budget = (peak * pct / 100).max(1);
        let rep = sim_ok(&cs, &b, Some(budget), &cost);
        // Conservation: applying the events reproduces the peak and never
        // frees bytes that are not live.
        let mut cur: i128 = 0;
        for e in &rep.events {
            cur += if e.kind.adds_bytes() { e.bytes as i128 } else { -(e.bytes as i128) };
            prop_assert!(cur >= 0);
        }
        prop_assert_eq!(rep.replayed_peak(), rep.peak_bytes);
        prop_assert_eq!(rep.success, rep.peak_bytes <= budget);
        // Every evicted value that is used again is regenerated first.
        let mut evicted: BTreeSet<String> = BTreeSet::new();
        for e in &rep.events {
            match e.kind {
                EventKind::Evict => { evicted.insert(e.value.clone()); }
                EventKind::Reload => { prop_assert!(evicted.remove(&e.value)); }
                _ => {}
            }
        }
        // Determinism.
        let again = sim_ok(&cs, &b, Some(budget), &cost);
        prop_assert_eq!(&again, &rep);
    }

    #[test]
    fn policy_maximizes_the_documented_score(items in prop::collection::vec((1u64..500, prop::option::of(1u64..2000)), 1..8), rr in 1.0f64..64.0, cr in 1.0f64..256.0) {
        let cost = CostModel { reload_rate: rr, compute_rate: cr };
        let cands: Vec<CandidateState> = items
            .iter()
            .enumerate()
            .map(|(i, (bytes, el))| CandidateState { value: ValueId(i as u32 * 3), bytes: *bytes, recompute_elements: *el })
            .collect();
        let (v, m) = evict_policy(&cands, &cost).unwrap();
        let score = |c: &CandidateState, m: Method| match m {
            Method::Reload => c.bytes as f64 / (c.bytes as f64 / rr),
            Method::Recompute => c.bytes as f64 / (c.recompute_elements.unwrap() as f64 / cr),
        };
        let chosen = cands.iter().find(|c| c.value == v).unwrap();
        let s = score(chosen, m);
        for c in &cands {
            let mut options = vec![Method::Reload];
            if c.recompute_elements.is_some() {
                options.push(Method::Recompute);
            }
            for o in options {
                let t = score(c, o);
                prop_assert!(t <= s);
                if t == s && c.value != v {
                    prop_assert!(c.bytes < chosen.bytes || (c.bytes == chosen.bytes && c.value > v));
                }
            }
        }
    }

    #[test]
    fn success_is_monotone_in_the_budget(seed in any::<u64>(), bseed in any::<u64>(), chain in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = if chain {
            activation_graph(&mut rng, 4..=10, true)
        } else {
            random_graph(&mut rng, &GenConfig::symbolic(2..=10))
        };
        let cs = case(g);
        let b = binding_for(&cs.c, bseed);
        prop_assume!(b.is_some());
        let b = b.unwrap();
        let peak = replay_plain(&cs.g, &cs.s, &b).unwrap().peak_bytes;
        let mut seen = false;
        for budget in (peak / 3).max(1)..=peak {
            let ok = sim_ok(&cs, &b, Some(budget), &CostModel::default()).success;
            prop_assert!(!seen || ok, "budget {} fails after a smaller one succeeded", budget);
            seen |= ok;
        }
        prop_assert!(seen);
    }

    #[test]
    fn empty_eviction_plan_matches_plain_replay(seed in any::<u64>(), bseed in any::<u64>()) {
        let cs = gen_case(seed, 8);
        let b = binding_for(&cs.c, bseed);
        prop_assume!(b.is_some());
        let b = b.unwrap();
        let peak = replay_plain(&cs.g, &cs.s, &b).unwrap().peak_bytes;
        prop_assert_eq!(plan_peak(&cs.g, &cs.inst, &b, &Default::default()), Some(peak));
        prop_assert_eq!(feasible_plan(&cs.g, &cs.inst, &b, peak), Some(Default::default()));
    }
}
