//! Text and JSON renderings of each pipeline stage.

use std::fmt::Write;

use dsg_core::graph::{Graph, OpId, ValueId};
use dsg_core::remat::InstrumentedGraph;
use dsg_core::scheduler::Schedule;
use dsg_core::sim::{EventKind, SimReport};
use dsg_core::textio::print_instrumented;
use dsg_core::Analysis;
use serde::Serialize;

#[derive(Serialize)]
pub struct ShapeEntry {
    pub value: String,
    #[serde(rename = "type")]
    pub ty: String,
    pub bytes: String,
}

#[derive(Serialize)]
pub struct AnalyzeReport {
    pub graph: String,
    pub shapes: Vec<ShapeEntry>,
    pub constraints: Vec<String>,
}

fn op_value(g: &Graph, op: OpId) -> String {
    g.value_name(g.op(op).results[0].0)
}

fn names(g: &Graph, vs: &[ValueId]) -> Vec<String> {
    vs.iter().map(|v| g.value_name(*v)).collect()
}

pub fn analyze(a: &Analysis) -> AnalyzeReport {
    let g = &a.graph;
    let shapes = g
        .ops()
        .iter()
        .flat_map(|op| op.results.iter())
        .map(|(v, ty)| ShapeEntry {
            value: g.value_name(*v),
            ty: ty.to_string(),
            bytes: ty.size_expr().map(|e| e.to_string()).unwrap_or_else(|e| e.to_string()),
        })
        .collect();
    AnalyzeReport {
        graph: g.name.clone(),
        shapes,
        constraints: a.constraints.dump_lines(),
    }
}

impl AnalyzeReport {
    pub fn text(&self) -> String {
        let mut out = format!("graph {}\n# shapes\n", self.graph);
        for s in &self.shapes {
            let _ = writeln!(out, "{}: {}  ({} bytes)", s.value, s.ty, s.bytes);
        }
        out.push_str("# constraints\n");
        for c in &self.constraints {
            let _ = writeln!(out, "{c}");
        }
        out
    }
}

#[derive(Serialize)]
pub struct StepEntry {
    pub step: usize,
    pub op: String,
    pub value: String,
    pub alloc_bytes: String,
    pub freed: Vec<String>,
    pub live_after: String,
}

#[derive(Serialize)]
pub struct Candidate {
    pub op: String,
    pub value: String,
    pub impact: String,
    pub canonical: String,
}

#[derive(Serialize)]
pub struct DecisionEntry {
    pub step: usize,
    pub rule: String,
    pub chosen: String,
    pub ready: Vec<Candidate>,
}

#[derive(Serialize)]
pub struct ScheduleReport {
    pub graph: String,
    pub order: Vec<String>,
    pub initial_live: String,
    pub steps: Vec<StepEntry>,
    pub decisions: Vec<DecisionEntry>,
}

pub fn schedule(a: &Analysis, s: &Schedule) -> ScheduleReport {
    let g = &a.graph;
    let steps = s
        .steps
        .iter()
        .enumerate()
        .map(|(i, st)| StepEntry {
            step: i,
            op: g.op(st.op).kind.mnemonic().to_string(),
            value: op_value(g, st.op),
            alloc_bytes: st.alloc_bytes.to_string(),
            freed: names(g, &st.free),
            live_after: st.live_after.to_string(),
        })
        .collect();
    let decisions = s
        .decisions
        .iter()
        .map(|d| DecisionEntry {
            step: d.step,
            rule: d.rule.to_string(),
            chosen: op_value(g, d.chosen),
            ready: d
                .ready
                .iter()
                .map(|(op, m)| Candidate {
                    op: g.op(*op).kind.mnemonic().to_string(),
                    value: op_value(g, *op),
                    impact: m.raw.to_string(),
                    canonical: m.canonical.to_string(),
                })
                .collect(),
        })
        .collect();
    ScheduleReport {
        graph: g.name.clone(),
        order: s.order().into_iter().map(|o| op_value(g, o)).collect(),
        initial_live: s.initial_live.to_string(),
        steps,
        decisions,
    }
}

impl ScheduleReport {
    pub fn text(&self) -> String {
        let mut out = format!("graph {}\ninitial live: {}\n", self.graph, self.initial_live);
        for (st, d) in self.steps.iter().zip(&self.decisions) {
            let _ = writeln!(
                out,
                "step {}: {} = {}  live {}",
                st.step, st.value, st.op, st.live_after
            );
            if d.ready.len() > 1 {
                let ready: Vec<String> = d
                    .ready
                    .iter()
                    .map(|c| {
                        if c.impact == c.canonical {
                            format!("{} {}", c.value, c.impact)
                        } else {
                            format!("{} {} (= {})", c.value, c.impact, c.canonical)
                        }
                    })
                    .collect();
                let _ = writeln!(out, "  ready [{}] -> {} by {}", ready.join(", "), d.chosen, d.rule);
            }
        }
        out
    }
}

#[derive(Serialize)]
pub struct EvictEntry {
    pub position: usize,
    pub after: String,
    pub candidates: Vec<String>,
}

#[derive(Serialize)]
pub struct GuardEntry {
    pub position: usize,
    pub value: String,
    pub consumer: String,
}

#[derive(Serialize)]
pub struct TraceEntry {
    pub absorbed: String,
    pub benefit: String,
    pub accepted: bool,
}

#[derive(Serialize)]
pub struct SubgraphEntry {
    pub value: String,
    pub recompute: bool,
    pub benefit: Option<String>,
    pub cost_elements: Option<String>,
    pub ops: Vec<String>,
    pub leaves: Vec<String>,
    pub trace: Vec<TraceEntry>,
}

#[derive(Serialize)]
pub struct RematReport {
    pub graph: String,
    pub evict_points: Vec<EvictEntry>,
    pub guards: Vec<GuardEntry>,
    pub subgraphs: Vec<SubgraphEntry>,
    #[serde(skip)]
    pub listing: String,
}

pub fn remat(a: &Analysis, inst: &InstrumentedGraph) -> RematReport {
    let g = &a.graph;
    let order = inst.schedule.order();
    RematReport {
        graph: g.name.clone(),
        evict_points: inst
            .evicts
            .iter()
            .map(|e| EvictEntry {
                position: e.position,
                after: op_value(g, order[e.position]),
                candidates: names(g, &e.candidates),
            })
            .collect(),
        guards: inst
            .guards
            .iter()
            .map(|gd| GuardEntry {
                position: gd.position,
                value: g.value_name(gd.value),
                consumer: op_value(g, gd.consumer),
            })
            .collect(),
        subgraphs: inst
            .specs
            .values()
            .map(|s| SubgraphEntry {
                value: g.value_name(s.target),
                recompute: s.recompute.is_some(),
                benefit: s.recompute.as_ref().map(|r| r.benefit.to_string()),
                cost_elements: s.recompute.as_ref().map(|r| r.cost.to_string()),
                ops: s
                    .recompute
                    .as_ref()
                    .map(|r| r.ops.iter().map(|o| op_value(g, *o)).collect())
                    .unwrap_or_default(),
                leaves: s.recompute.as_ref().map(|r| names(g, &r.leaves)).unwrap_or_default(),
                trace: s
                    .trace
                    .iter()
                    .map(|t| TraceEntry {
                        absorbed: op_value(g, t.absorbed),
                        benefit: t.benefit.to_string(),
                        accepted: t.accepted,
                    })
                    .collect(),
            })
            .collect(),
        listing: print_instrumented(g, inst),
    }
}

impl RematReport {
    pub fn text(&self) -> String {
        let mut out = self.listing.clone();
        out.push_str("# recompute search\n");
        for s in &self.subgraphs {
            let trace: Vec<String> = s
                .trace
                .iter()
                .map(|t| format!("{}{}", t.benefit, if t.accepted { " (accepted)" } else { "" }))
                .collect();
            let verdict = match &s.benefit {
                Some(b) => format!(
                    "recompute [{}] from [{}], benefit {b}",
                    s.ops.join(", "),
                    s.leaves.join(", ")
                ),
                None => "reload only".to_string(),
            };
            let _ = writeln!(out, "{}: {verdict}; trace {}", s.value, trace.join(", "));
        }
        out
    }
}

pub fn simulate_text(r: &SimReport) -> String {
    let binding: Vec<String> = r.binding.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let budget = r.budget.map_or("unlimited".to_string(), |b| b.to_string());
    let mut out = format!(
        "binding {}\nbudget {budget}\npeak {}\nsuccess {}\nevictions {}\nregen cost {}\n",
        binding.join(" "),
        r.peak_bytes,
        r.success,
        r.evictions().count(),
        r.total_regen_cost
    );
    for e in r
        .events
        .iter()
        .filter(|e| e.kind != EventKind::Alloc && e.kind != EventKind::Free)
    {
        let method = e.method.map(|m| format!(" {}", m)).unwrap_or_default();
        let kind = format!("{:?}", e.kind).to_lowercase();
        let _ = writeln!(out, "step {}: {kind} {} {} bytes{method}", e.step, e.value, e.bytes);
    }
    out
}
