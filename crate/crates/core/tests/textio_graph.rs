use std::collections::BTreeSet;

use dsg_core::graph::{Graph, OpId, ValueId};
use dsg_core::shape::derive_constraints;
use dsg_core::textio::{parse, parse_with_spans, print};
use dsg_core::ShapeError;
use dsg_testgen::{random_graph, GenConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture(name: &str) -> String {
    std::fs::read_to_string(format!("{}/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

#[test]
fn fixture_prints_to_golden_file() {
    let g = parse(&fixture("reshape_chain.dsg")).unwrap();
    assert_eq!(print(&g), fixture("reshape_chain.golden.dsg"));
    let again = parse(&print(&g)).unwrap();
    assert_eq!(print(&again), print(&g));
}

#[test]
fn fixture_constraints() {
    let g = parse(&fixture("reshape_chain.dsg")).unwrap();
    let c = derive_constraints(&g).unwrap();
    assert_eq!(c.dump_lines(), vec!["@S0 = 12*@S1".to_string()]);

    let lit = parse(&fixture("literal_chain.dsg")).unwrap();
    assert!(derive_constraints(&lit).unwrap().dump_lines().is_empty());

    let bad = parse(&fixture("inconsistent_reshape.dsg")).unwrap();
    let err = derive_constraints(&bad).unwrap_err();
    assert!(matches!(err, ShapeError::Inconsistent(_)));
    assert!(err.to_string().starts_with("InconsistentConstraints"));
}

/// Every edge goes from an earlier position to a later one.
fn is_topological(g: &Graph, order: &[OpId]) -> bool {
    let pos: Vec<usize> = {
        let mut p = vec![usize::MAX; g.ops().len()];
        for (i, id) in order.iter().enumerate() {
            p[id.index()] = i;
        }
        p
    };
    order.len() == g.ops().len()
        && g.ops().iter().all(|op| {
            op.operands
                .iter()
                .all(|v| g.producer(*v).is_some_and(|p| pos[p.id.index()] < pos[op.id.index()]))
        })
}

fn seeded(seed: u64, symbolic: bool) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = if symbolic {
        GenConfig::symbolic(1..=12)
    } else {
        GenConfig::literal(1..=12)
    };
    random_graph(&mut rng, &cfg)
}

proptest! {
    #[test]
    fn round_trip_is_structural_identity(seed in any::<u64>(), symbolic in any::<bool>()) {
        let g = seeded(seed, symbolic);
        let text = print(&g);
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(print(&back), text);
    }

    #[test]
    fn topo_order_respects_every_edge(seed in any::<u64>(), symbolic in any::<bool>()) {
        let g = seeded(seed, symbolic);
        prop_assert!(is_topological(&g, &g.topo_order().unwrap()));
    }

    #[test]
    fn users_match_an_operand_scan(seed in any::<u64>()) {
        let g = seeded(seed, true);
        for i in 0..g.num_values() {
            let v = ValueId(i as u32);
            let scan: BTreeSet<OpId> = g
                .ops()
                .iter()
                .filter(|op| op.operands.contains(&v))
                .map(|op| op.id)
                .collect();
            prop_assert_eq!(g.users(v).unwrap(), scan);
        }
    }

    #[test]
    fn parse_error_spans_stay_in_bounds(pos in 0usize..1500, byte in prop::sample::select(vec![b'(', b')', b',', b'%', b'@', b'x', b'0', b':', b'}', b'#', b'\n'])) {
        let mut text = fixture("reshape_chain.dsg").into_bytes();
        let pos = pos % text.len();
        text[pos] = byte;
        let text = String::from_utf8(text).unwrap();
        if let Err(e) = parse_with_spans(&text) {
            let s = e.span;
            prop_assert!(s.start <= s.end && s.end <= text.len());
            let line_start = text[..s.start].rfind('\n').map_or(0, |i| i + 1);
            prop_assert_eq!(s.line, text[..s.start].matches('\n').count() + 1);
            prop_assert_eq!(s.column, text[line_start..s.start].chars().count() + 1);
        }
    }
}
