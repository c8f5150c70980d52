//! Random graphs, bindings and symbolic expressions for property tests.
//!
//! Generated graphs put every parameter first and append ops in dependency
//! order with default (numeric) value names, which is exactly the form the
//! printer produces, so `parse(print(g)) == g` holds structurally.

pub mod oracle;

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use dsg_core::graph::{BinaryOp, DType, DimSize, Graph, GraphBuilder, OpKind, TensorType, ValueId};
use dsg_core::shape::{derive_constraints, ShapeConstraintGraph};
use dsg_core::sim::{bind, Binding};
use dsg_core::symexpr::{Monomial, Symbol, SymbolicExpr};
use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct GenConfig {
    /// Number of compute ops.
    pub ops: RangeInclusive<usize>,
    /// Use symbolic dims; otherwise every dim is a literal.
    pub symbolic: bool,
    pub max_rank: usize,
    pub constants: bool,
    pub mixed_dtypes: bool,
}

impl GenConfig {
    pub fn literal(ops: RangeInclusive<usize>) -> Self {
        GenConfig {
            ops,
            symbolic: false,
            max_rank: 3,
            constants: true,
            mixed_dtypes: true,
        }
    }

    pub fn symbolic(ops: RangeInclusive<usize>) -> Self {
        GenConfig {
            symbolic: true,
            ..GenConfig::literal(ops)
        }
    }
}

enum Item {
    Param,
    Const,
    Op(OpKind, Vec<usize>),
}

struct Plan {
    items: Vec<(Item, TensorType)>,
    next_symbol: u32,
    dtype: DType,
}

impl Plan {
    fn push(&mut self, item: Item, ty: TensorType) -> usize {
        self.items.push((item, ty));
        self.items.len() - 1
    }

    fn ty(&self, i: usize) -> &TensorType {
        &self.items[i].1
    }

    fn fresh_symbol(&mut self) -> DimSize {
        let s = Symbol(self.next_symbol);
        self.next_symbol += 1;
        DimSize::Symbolic(s)
    }
}

fn literal_dim<R: Rng>(rng: &mut R) -> DimSize {
    DimSize::Literal(*[1u64, 2, 3, 4, 6, 8].choose(rng).unwrap())
}

fn random_dim<R: Rng>(rng: &mut R, cfg: &GenConfig, base_symbols: u32) -> DimSize {
    if cfg.symbolic && rng.gen_bool(0.5) {
        DimSize::Symbolic(Symbol(rng.gen_range(0..base_symbols)))
    } else {
        literal_dim(rng)
    }
}

fn random_type<R: Rng>(rng: &mut R, cfg: &GenConfig, base_symbols: u32, dtype: DType) -> TensorType {
    let rank = rng.gen_range(1..=cfg.max_rank.max(1));
    TensorType::new((0..rank).map(|_| random_dim(rng, cfg, base_symbols)).collect(), dtype)
}

/// Builds a random, shape-consistent graph whose constraint system leaves
/// its basis symbols free, so any basis binding is admissible.
pub fn random_graph<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Graph {
    loop {
        let g = random_graph_once(rng, cfg);
        match derive_constraints(&g) {
            Ok(c) if c.unoriented().is_empty() => return g,
            _ => continue,
        }
    }
}

fn random_graph_once<R: Rng>(rng: &mut R, cfg: &GenConfig) -> Graph {
    let base_symbols = if cfg.symbolic { rng.gen_range(1..=3) } else { 0 };
    let dtype = if cfg.mixed_dtypes {
        *[DType::F16, DType::F32, DType::I8].choose(rng).unwrap()
    } else {
        DType::F16
    };
    let mut plan = Plan {
        items: Vec::new(),
        next_symbol: base_symbols,
        dtype,
    };
    for _ in 0..rng.gen_range(1..=2) {
        let ty = random_type(rng, cfg, base_symbols, dtype);
        plan.push(Item::Param, ty);
    }
    let target = rng.gen_range(cfg.ops.clone());
    let mut emitted = 0;
    let mut attempts = 0;
    while emitted < target && attempts < target * 50 {
        attempts += 1;
        if gen_op(rng, cfg, &mut plan, base_symbols) {
            emitted += 1;
        }
    }
    emit(plan)
}

/// A forward chain whose activations are consumed again in reverse order,
/// so intermediates stay live across the middle of the schedule. Every
/// value except the final accumulator has a consumer.
pub fn activation_graph<R: Rng>(rng: &mut R, ops: RangeInclusive<usize>, symbolic: bool) -> Graph {
    let cfg = GenConfig {
        constants: false,
        mixed_dtypes: false,
        ..if symbolic {
            GenConfig::symbolic(ops.clone())
        } else {
            GenConfig::literal(ops.clone())
        }
    };
    let base_symbols = if symbolic { rng.gen_range(1..=2) } else { 0 };
    let dtype = DType::F16;
    let mut plan = Plan {
        items: Vec::new(),
        next_symbol: base_symbols,
        dtype,
    };
    let rank = rng.gen_range(1..=2);
    let x = plan.push(
        Item::Param,
        TensorType::new((0..rank).map(|_| random_dim(rng, &cfg, base_symbols)).collect(), dtype),
    );
    let target = rng.gen_range(ops).max(2);
    let forward = rng.gen_range((target / 2).max(1)..=target.div_ceil(2));
    let mut acts = vec![x];
    for _ in 0..forward {
        let f = *acts.last().unwrap();
        let tf = plan.ty(f).clone();
        let choice = rng.gen_range(0..3);
        let i = if choice == 1 && tf.rank() < cfg.max_rank {
            let mut dims = tf.dims.clone();
            dims.push(random_dim(rng, &cfg, base_symbols));
            plan.push(Item::Op(OpKind::Broadcast, vec![f]), TensorType::new(dims, dtype))
        } else if choice == 2 && tf.rank() >= 2 {
            let dims = tf.dims[..tf.rank() - 1].to_vec();
            plan.push(
                Item::Op(OpKind::Reduce { axis: tf.rank() - 1 }, vec![f]),
                TensorType::new(dims, dtype),
            )
        } else {
            plan.push(Item::Op(OpKind::Elementwise(BinaryOp::Mul), vec![f, f]), tf)
        };
        acts.push(i);
    }
    let mut emitted = forward;
    let mut acc = acts.pop().unwrap();
    while let Some(f) = acts.pop() {
        if f == x || emitted >= target {
            break;
        }
        let want = plan.ty(f).dims.clone();
        let prefix = plan.ty(acc).dims.iter().zip(&want).take_while(|(a, b)| a == b).count();
        while plan.ty(acc).rank() > prefix && emitted < target {
            let t = plan.ty(acc).clone();
            let dims = t.dims[..t.rank() - 1].to_vec();
            acc = plan.push(
                Item::Op(OpKind::Reduce { axis: t.rank() - 1 }, vec![acc]),
                TensorType::new(dims, dtype),
            );
            emitted += 1;
        }
        if plan.ty(acc).rank() < want.len() && emitted < target {
            acc = plan.push(
                Item::Op(OpKind::Broadcast, vec![acc]),
                TensorType::new(want.clone(), dtype),
            );
            emitted += 1;
        }
        if plan.ty(acc).dims != want || emitted >= target {
            break;
        }
        acc = plan.push(
            Item::Op(OpKind::Elementwise(BinaryOp::Add), vec![acc, f]),
            TensorType::new(want, dtype),
        );
        emitted += 1;
    }
    emit(plan)
}

/// Prefers recent values so graphs grow deep rather than wide.
fn pick_value<R: Rng>(rng: &mut R, plan: &Plan) -> usize {
    let n = plan.items.len();
    if rng.gen_bool(0.6) {
        rng.gen_range(n.saturating_sub(3)..n)
    } else {
        rng.gen_range(0..n)
    }
}

fn gen_op<R: Rng>(rng: &mut R, cfg: &GenConfig, plan: &mut Plan, base_symbols: u32) -> bool {
    let a = pick_value(rng, plan);
    let ta = plan.ty(a).clone();
    let dtype = plan.dtype;
    match rng.gen_range(0..6) {
        0 => {
            let partners: Vec<usize> = (0..plan.items.len()).filter(|i| plan.ty(*i).dims == ta.dims).collect();
            let b = *partners.choose(rng).unwrap();
            let op = if rng.gen_bool(0.5) {
                BinaryOp::Add
            } else {
                BinaryOp::Mul
            };
            plan.push(Item::Op(OpKind::Elementwise(op), vec![a, b]), ta);
            true
        }
        1 => {
            if ta.rank() == 0 {
                return false;
            }
            let axis = rng.gen_range(0..ta.rank());
            let mut dims = ta.dims.clone();
            dims.remove(axis);
            plan.push(Item::Op(OpKind::Reduce { axis }, vec![a]), TensorType::new(dims, dtype));
            true
        }
        2 => {
            if ta.rank() >= cfg.max_rank {
                return false;
            }
            let mut dims = ta.dims.clone();
            dims.push(random_dim(rng, cfg, base_symbols));
            plan.push(Item::Op(OpKind::Broadcast, vec![a]), TensorType::new(dims, dtype));
            true
        }
        3 => {
            let Some(&k) = ta.dims.last() else {
                return false;
            };
            let n = random_dim(rng, cfg, base_symbols);
            let w = plan.push(Item::Param, TensorType::new(vec![k, n], dtype));
            let mut dims = ta.dims[..ta.rank() - 1].to_vec();
            dims.push(n);
            plan.push(Item::Op(OpKind::Dot, vec![a, w]), TensorType::new(dims, dtype));
            true
        }
        4 => match reshape_dims(rng, cfg, plan, &ta) {
            Some(dims) => {
                plan.push(Item::Op(OpKind::DynamicReshape, vec![a]), TensorType::new(dims, dtype));
                true
            }
            None => false,
        },
        _ => {
            if !cfg.constants {
                return false;
            }
            // A constant shaped like `a`, combined with it right away.
            let c = plan.push(Item::Const, ta.clone());
            plan.push(Item::Op(OpKind::Elementwise(BinaryOp::Add), vec![a, c]), ta);
            true
        }
    }
}

fn reshape_dims<R: Rng>(rng: &mut R, cfg: &GenConfig, plan: &mut Plan, ta: &TensorType) -> Option<Vec<DimSize>> {
    let mut dims = ta.dims.clone();
    if dims.len() >= 2 && rng.gen_bool(0.5) {
        // Flatten two adjacent dims.
        let i = rng.gen_range(0..dims.len() - 1);
        let merged = match (dims[i], dims[i + 1]) {
            (DimSize::Literal(x), DimSize::Literal(y)) => DimSize::Literal(x * y),
            _ if cfg.symbolic => plan.fresh_symbol(),
            _ => return None,
        };
        dims.splice(i..=i + 1, [merged]);
        return Some(dims);
    }
    // Split a literal dim into two factors.
    let splittable: Vec<usize> = (0..dims.len())
        .filter(|i| matches!(dims[*i], DimSize::Literal(d) if d % 2 == 0))
        .collect();
    let &i = splittable.choose(rng)?;
    if dims.len() >= cfg.max_rank {
        return None;
    }
    let DimSize::Literal(d) = dims[i] else {
        return None;
    };
    dims.splice(i..=i, [DimSize::Literal(2), DimSize::Literal(d / 2)]);
    Some(dims)
}

/// Parameters first, then the other items in plan order; outputs are the
/// compute results nobody consumes.
fn emit(plan: Plan) -> Graph {
    let mut b = GraphBuilder::new("gen");
    let mut ids: Vec<Option<ValueId>> = vec![None; plan.items.len()];
    for (i, (item, ty)) in plan.items.iter().enumerate() {
        if let Item::Param = item {
            ids[i] = Some(b.parameter(ty.clone()));
        }
    }
    let mut used = vec![false; plan.items.len()];
    for (item, _) in &plan.items {
        if let Item::Op(_, operands) = item {
            for o in operands {
                used[*o] = true;
            }
        }
    }
    let mut outputs = Vec::new();
    for (i, (item, ty)) in plan.items.iter().enumerate() {
        match item {
            Item::Param => {}
            Item::Const => ids[i] = Some(b.add_op(OpKind::Constant, Vec::new(), ty.clone())),
            Item::Op(kind, operands) => {
                let operands = operands.iter().map(|o| ids[*o].unwrap()).collect();
                let v = b.add_op(*kind, operands, ty.clone());
                ids[i] = Some(v);
                if !used[i] {
                    outputs.push(v);
                }
            }
        }
    }
    if outputs.is_empty() {
        outputs.push(ids[plan.items.len() - 1].unwrap());
    }
    b.finish(outputs)
}

/// Values in `range` for every basis symbol.
pub fn random_binding<R: Rng>(
    rng: &mut R,
    constraints: &ShapeConstraintGraph,
    range: RangeInclusive<i64>,
) -> BTreeMap<Symbol, i64> {
    constraints
        .basis_symbols()
        .into_iter()
        .map(|s| (s, rng.gen_range(range.clone())))
        .collect()
}

/// A binding drawn from `range` that satisfies the constraints, if one is
/// found within a few attempts (derived symbols must also come out >= 1).
pub fn random_valid_binding<R: Rng>(
    rng: &mut R,
    constraints: &ShapeConstraintGraph,
    range: RangeInclusive<i64>,
) -> Option<Binding> {
    (0..64).find_map(|_| bind(constraints, &random_binding(rng, constraints, range.clone())).ok())
}

/// Random polynomial over `symbols` with up to `max_terms` terms of degree
/// at most 2 and coefficients in `coeffs`.
pub fn random_expr<R: Rng>(
    rng: &mut R,
    symbols: &[Symbol],
    max_terms: usize,
    coeffs: RangeInclusive<i64>,
) -> SymbolicExpr {
    let mut e = SymbolicExpr::zero();
    for _ in 0..rng.gen_range(0..=max_terms) {
        let degree = if symbols.is_empty() { 0 } else { rng.gen_range(0..=2) };
        let mono = Monomial::from_symbols((0..degree).map(|_| *symbols.choose(rng).unwrap()).collect());
        let c = rng.gen_range(coeffs.clone()) as i128;
        e = e
            .checked_add(&SymbolicExpr::term(c, mono))
            .expect("small terms do not overflow");
    }
    e
}

/// Random closed constraint system: `basis` free symbols, and `derived`
/// symbols each defined by a polynomial over the basis with nonnegative
/// coefficients and a positive constant, so any basis binding >= 1 gives
/// derived values >= 1.
pub fn random_constraints<R: Rng>(rng: &mut R, basis: u32, derived: u32) -> ShapeConstraintGraph {
    let base: Vec<Symbol> = (0..basis).map(Symbol).collect();
    let mut subs = BTreeMap::new();
    for k in basis..basis + derived {
        let e = random_expr(rng, &base, 3, 0..=4)
            .checked_add(&SymbolicExpr::constant(rng.gen_range(1..=3)))
            .unwrap();
        subs.insert(Symbol(k), e);
    }
    ShapeConstraintGraph::from_substitutions(subs).expect("acyclic substitutions are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_graphs_validate_and_analyze() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..300 {
            let cfg = if i % 2 == 0 {
                GenConfig::literal(4..=10)
            } else {
                GenConfig::symbolic(4..=10)
            };
            let g = random_graph(&mut rng, &cfg);
            g.validate().unwrap();
            let c = derive_constraints(&g).unwrap();
            if !cfg.symbolic {
                assert!(c.substitutions().is_empty());
                assert!(g.symbols().is_empty());
            }
        }
    }

    #[test]
    fn activation_graphs_have_one_output_and_fit_the_op_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..300 {
            let g = activation_graph(&mut rng, 4..=8, i % 2 == 0);
            g.validate().unwrap();
            derive_constraints(&g).unwrap();
            let compute = g.ops().iter().filter(|op| op.kind.is_compute()).count();
            assert!((2..=8).contains(&compute), "{compute}");
            assert_eq!(g.outputs().len(), 1);
            assert_eq!(g.parameters().len(), 1);
        }
    }
}
