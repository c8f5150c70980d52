//! Shape inference and the global symbolic shape graph.
//!
//! Each op contributes equalities between dimension expressions. Plain
//! symbol-to-symbol equalities are merged with a union-find (smallest symbol
//! is the representative); the remaining equalities are oriented into
//! integer substitutions `S_a -> expr` wherever that needs no division with
//! remainder. Anything left over is retained for equality checks only.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::graph::{DimSize, Graph, OpId, OpKind, TensorType};
use crate::symexpr::{is_rational_multiple, ExprError, Monomial, Symbol, SymbolicExpr};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("ShapeError: op #{}: {message}", op.0)]
    Shape { op: OpId, message: String },
    #[error("InconsistentConstraints: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

fn shape_err(op: OpId, message: impl Into<String>) -> ShapeError {
    ShapeError::Shape {
        op,
        message: message.into(),
    }
}

/// `lhs = rhs`, recorded by the op that implies it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Equality {
    pub lhs: SymbolicExpr,
    pub rhs: SymbolicExpr,
    pub origin: Option<OpId>,
}

impl Equality {
    pub fn new(lhs: SymbolicExpr, rhs: SymbolicExpr, origin: Option<OpId>) -> Self {
        Equality { lhs, rhs, origin }
    }
}

/// Symbols, the equalities between them, and the derived substitution basis.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShapeConstraintGraph {
    symbols: BTreeSet<Symbol>,
    equalities: Vec<Equality>,
    substitutions: BTreeMap<Symbol, SymbolicExpr>,
    /// Canonical differences known to be zero that could not be oriented.
    unoriented: Vec<SymbolicExpr>,
}

impl ShapeConstraintGraph {
    pub fn new(symbols: BTreeSet<Symbol>) -> Self {
        ShapeConstraintGraph {
            symbols,
            ..Default::default()
        }
    }

    /// Builds a closed basis from raw substitutions `sym -> expr`.
    pub fn from_substitutions(subs: impl IntoIterator<Item = (Symbol, SymbolicExpr)>) -> Result<Self, ShapeError> {
        let mut cg = ShapeConstraintGraph::default();
        for (s, e) in subs {
            cg.symbols.insert(s);
            cg.symbols.extend(e.symbols());
            cg.equalities
                .push(Equality::new(SymbolicExpr::symbol(s), e.clone(), None));
            cg.substitutions.insert(s, e);
        }
        canonical_basis(&cg)
    }

    pub fn symbols(&self) -> &BTreeSet<Symbol> {
        &self.symbols
    }

    pub fn equalities(&self) -> &[Equality] {
        &self.equalities
    }

    pub fn substitutions(&self) -> &BTreeMap<Symbol, SymbolicExpr> {
        &self.substitutions
    }

    pub fn unoriented(&self) -> &[SymbolicExpr] {
        &self.unoriented
    }

    /// Symbols not eliminated by the substitution map.
    pub fn basis_symbols(&self) -> BTreeSet<Symbol> {
        self.symbols
            .iter()
            .filter(|s| !self.substitutions.contains_key(s))
            .copied()
            .collect()
    }

    pub fn canonicalize(&self, e: &SymbolicExpr) -> Result<SymbolicExpr, ExprError> {
        e.substitute_all(&self.substitutions)
    }

    pub(crate) fn is_multiple_of_unoriented(&self, d: &SymbolicExpr) -> bool {
        self.unoriented.iter().any(|u| is_rational_multiple(d, u))
    }

    /// One `@S0 = 12*@S1` line per substitution, sorted by eliminated symbol.
    pub fn dump_lines(&self) -> Vec<String> {
        self.substitutions
            .iter()
            .map(|(s, e)| format!("@{s} = {}", e.to_ir_string()))
            .collect()
    }

    /// Adds `sym -> rep` and rewrites existing right-hand sides so the map
    /// stays closed.
    fn insert_substitution(&mut self, sym: Symbol, rep: &SymbolicExpr) -> Result<(), ShapeError> {
        let rep = self.canonicalize(rep)?;
        if rep.contains_symbol(sym) {
            if rep == SymbolicExpr::symbol(sym) {
                return Ok(());
            }
            return Err(ShapeError::Inconsistent(format!(
                "substitution cycle: @{sym} = {}",
                rep.to_ir_string()
            )));
        }
        if let Some(existing) = self.substitutions.get(&sym).cloned() {
            // Already eliminated: the two right-hand sides must agree.
            let d = existing.checked_sub(&rep)?;
            return self.add_difference(d, &format!("@{sym}"));
        }
        for v in self.substitutions.values_mut() {
            *v = v.substitute(sym, &rep)?;
        }
        for u in &mut self.unoriented {
            *u = u.substitute(sym, &rep)?;
        }
        self.substitutions.insert(sym, rep);
        Ok(())
    }

    /// Records the fact `d = 0`.
    fn add_difference(&mut self, d: SymbolicExpr, what: &str) -> Result<(), ShapeError> {
        let d = self.canonicalize(&d)?.without_common_factor();
        match d.definite_sign() {
            Some(Ordering::Equal) => Ok(()),
            Some(_) => Err(ShapeError::Inconsistent(format!(
                "{what}: {} = 0 has no solution with dims >= 1",
                d.to_ir_string()
            ))),
            None => match orient(&d)? {
                Some((sym, rep)) => self.insert_substitution(sym, &rep),
                None => {
                    if !self.is_multiple_of_unoriented(&d) {
                        self.unoriented.push(d);
                    }
                    Ok(())
                }
            },
        }
    }

    /// Re-examines retained equalities until nothing more can be oriented.
    fn settle_unoriented(&mut self) -> Result<(), ShapeError> {
        loop {
            let pending = std::mem::take(&mut self.unoriented);
            let before = pending.len();
            for d in pending {
                self.add_difference(d, "retained equality")?;
            }
            if self.unoriented.len() >= before {
                return Ok(());
            }
        }
    }
}

/// Picks a symbol to eliminate from `d = 0`: it must appear only as a linear
/// term `c*S` whose coefficient divides every other coefficient. Among those
/// the largest symbol is eliminated.
fn orient(d: &SymbolicExpr) -> Result<Option<(Symbol, SymbolicExpr)>, ExprError> {
    let mut choice = None;
    for sym in d.symbols() {
        let linear = Monomial::from_symbols(vec![sym]);
        let c = d.coeff(&linear);
        if c == 0 {
            continue;
        }
        let isolated = d.terms().all(|(m, _)| *m == linear || !m.contains(sym));
        let divides = d.terms().all(|(m, k)| *m == linear || k % c == 0);
        if isolated && divides {
            choice = Some((sym, linear, c));
        }
    }
    let Some((sym, linear, c)) = choice else {
        return Ok(None);
    };
    // c*S + rest = 0  =>  S = -rest / c
    let mut rep = SymbolicExpr::zero();
    for (m, k) in d.terms() {
        if *m != linear {
            rep = rep.checked_add(&SymbolicExpr::term(-(k / c), m.clone()))?;
        }
    }
    Ok(Some((sym, rep)))
}

/// Union-find over symbols; the smallest symbol of a class is its root.
#[derive(Debug, Default)]
pub struct SymbolUnionFind {
    parent: BTreeMap<Symbol, Symbol>,
}

impl SymbolUnionFind {
    pub fn find(&mut self, s: Symbol) -> Symbol {
        let p = *self.parent.entry(s).or_insert(s);
        if p == s {
            return s;
        }
        let root = self.find(p);
        self.parent.insert(s, root);
        root
    }

    pub fn union(&mut self, a: Symbol, b: Symbol) -> Symbol {
        let (ra, rb) = (self.find(a), self.find(b));
        let (root, child) = if ra <= rb { (ra, rb) } else { (rb, ra) };
        self.parent.insert(child, root);
        root
    }

    /// `(member, representative)` for every non-root symbol.
    pub fn merged(&mut self) -> Vec<(Symbol, Symbol)> {
        let keys: Vec<Symbol> = self.parent.keys().copied().collect();
        keys.into_iter()
            .filter_map(|s| {
                let r = self.find(s);
                (r != s).then_some((s, r))
            })
            .collect()
    }
}

fn single_symbol(e: &SymbolicExpr) -> Option<Symbol> {
    let mut terms = e.terms();
    match (terms.next(), terms.next()) {
        (Some((m, 1)), None) if m.degree() == 1 => Some(m.symbols()[0]),
        _ => None,
    }
}

struct Facts {
    op: OpId,
    out: Vec<Equality>,
}

impl Facts {
    fn dims_equal(&mut self, a: DimSize, b: DimSize, what: &str) -> Result<(), ShapeError> {
        match (a, b) {
            (DimSize::Literal(x), DimSize::Literal(y)) if x != y => Err(shape_err(
                self.op,
                format!("{what}: literal dim {x} conflicts with {y}"),
            )),
            _ if a == b => Ok(()),
            _ => {
                self.out.push(Equality::new(a.to_expr(), b.to_expr(), Some(self.op)));
                Ok(())
            }
        }
    }

    fn shapes_equal(&mut self, inferred: &[DimSize], declared: &[DimSize], what: &str) -> Result<(), ShapeError> {
        if inferred.len() != declared.len() {
            return Err(shape_err(
                self.op,
                format!(
                    "{what}: rank mismatch, expected {} dims, found {}",
                    inferred.len(),
                    declared.len()
                ),
            ));
        }
        for (a, b) in inferred.iter().zip(declared) {
            self.dims_equal(*a, *b, what)?;
        }
        Ok(())
    }
}

/// Checks every op's declared result type against its kind rule and returns
/// the dimension equalities the rules imply, in op order.
///
/// - `dot`: `[.., k] x [k, n] -> [.., n]`
/// - `dynamic_reshape`: declared result accepted, element counts equal
/// - `reduce`: the axis is removed
/// - `broadcast`: source dims align with the leading result dims; each is
///   either literal 1 or equal to the result dim
/// - `add`/`mul`: operands and result share one shape
pub fn infer_shapes(graph: &Graph) -> Result<Vec<Equality>, ShapeError> {
    let mut facts = Facts {
        op: OpId(0),
        out: Vec::new(),
    };
    for op in graph.ops() {
        if !op.kind.is_compute() {
            continue;
        }
        facts.op = op.id;
        let operand = |i: usize| -> Result<&TensorType, ShapeError> {
            op.operands
                .get(i)
                .and_then(|v| graph.value_type(*v))
                .ok_or_else(|| shape_err(op.id, "missing operand"))
        };
        let declared = &op.results.first().ok_or_else(|| shape_err(op.id, "missing result"))?.1;
        match op.kind {
            OpKind::Dot => {
                let (lhs, rhs) = (operand(0)?, operand(1)?);
                if lhs.rank() < 1 || rhs.rank() != 2 {
                    return Err(shape_err(
                        op.id,
                        format!(
                            "dot needs lhs rank >= 1 and rhs rank 2, found {} and {}",
                            lhs.rank(),
                            rhs.rank()
                        ),
                    ));
                }
                facts.dims_equal(lhs.dims[lhs.rank() - 1], rhs.dims[0], "dot contraction")?;
                let mut inferred = lhs.dims[..lhs.rank() - 1].to_vec();
                inferred.push(rhs.dims[1]);
                facts.shapes_equal(&inferred, &declared.dims, "dot result")?;
            }
            OpKind::DynamicReshape => {
                let input = operand(0)?;
                let lhs = input.num_elements_expr()?;
                let rhs = declared.num_elements_expr()?;
                if lhs != rhs {
                    facts.out.push(Equality::new(lhs, rhs, Some(op.id)));
                }
            }
            OpKind::Reduce { axis } => {
                let input = operand(0)?;
                if axis >= input.rank() {
                    return Err(shape_err(
                        op.id,
                        format!("reduce axis {axis} out of range for rank {}", input.rank()),
                    ));
                }
                let mut inferred = input.dims.clone();
                inferred.remove(axis);
                facts.shapes_equal(&inferred, &declared.dims, "reduce result")?;
            }
            OpKind::Broadcast => {
                let input = operand(0)?;
                if input.rank() > declared.rank() {
                    return Err(shape_err(
                        op.id,
                        format!("broadcast cannot lower rank {} to {}", input.rank(), declared.rank()),
                    ));
                }
                for (src, dst) in input.dims.iter().zip(&declared.dims) {
                    if !src.is_one() {
                        facts.dims_equal(*src, *dst, "broadcast")?;
                    }
                }
            }
            OpKind::Elementwise(_) => {
                let (lhs, rhs) = (operand(0)?, operand(1)?);
                facts.shapes_equal(&lhs.dims, &rhs.dims, "elementwise operands")?;
                facts.shapes_equal(&lhs.dims, &declared.dims, "elementwise result")?;
            }
            OpKind::Parameter | OpKind::Constant | OpKind::Return => {}
        }
    }
    Ok(facts.out)
}

/// Runs shape inference and reduces the resulting equalities to a closed
/// substitution basis.
pub fn derive_constraints(graph: &Graph) -> Result<ShapeConstraintGraph, ShapeError> {
    let facts = infer_shapes(graph)?;
    let mut cg = ShapeConstraintGraph::new(graph.symbols().clone());

    let mut uf = SymbolUnionFind::default();
    let mut rest = Vec::new();
    for eq in &facts {
        match (single_symbol(&eq.lhs), single_symbol(&eq.rhs)) {
            (Some(a), Some(b)) => {
                uf.union(a, b);
            }
            _ => rest.push(eq),
        }
    }
    for (member, rep) in uf.merged() {
        cg.insert_substitution(member, &SymbolicExpr::symbol(rep))?;
    }
    for eq in rest {
        let d = eq.lhs.checked_sub(&eq.rhs)?;
        let what = match eq.origin {
            Some(op) => format!("op #{}", op.0),
            None => "equality".to_string(),
        };
        cg.add_difference(d, &what)?;
    }
    cg.settle_unoriented()?;
    cg.equalities = facts;
    Ok(cg)
}

/// Closes the substitution map under itself, processing eliminated symbols
/// in order. A substitution that leads back to its own symbol with a
/// different expression is a cycle and therefore inconsistent.
pub fn canonical_basis(constraints: &ShapeConstraintGraph) -> Result<ShapeConstraintGraph, ShapeError> {
    let mut out = ShapeConstraintGraph {
        symbols: constraints.symbols.clone(),
        equalities: constraints.equalities.clone(),
        ..Default::default()
    };
    for (s, e) in &constraints.substitutions {
        out.insert_substitution(*s, e)?;
    }
    for d in &constraints.unoriented {
        let d = out.canonicalize(d)?;
        if !d.is_zero() && !out.is_multiple_of_unoriented(&d) {
            out.unoriented.push(d);
        }
    }
    Ok(out)
}

/// Byte size of `t`, rewritten onto the constraint basis.
pub fn tensor_size_expr(t: &TensorType, constraints: &ShapeConstraintGraph) -> Result<SymbolicExpr, ExprError> {
    constraints.canonicalize(&t.size_expr()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BinaryOp, DType, GraphBuilder};

    fn sym(k: u32) -> DimSize {
        DimSize::Symbolic(Symbol(k))
    }
    fn lit(v: u64) -> DimSize {
        DimSize::Literal(v)
    }
    fn ty(dims: Vec<DimSize>) -> TensorType {
        TensorType::new(dims, DType::I8)
    }
    fn lin(c: i128, k: u32) -> SymbolicExpr {
        SymbolicExpr::term(c, Monomial::from_symbols(vec![Symbol(k)]))
    }

    #[test]
    fn dot_reduce_elementwise_rules() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(1), lit(12)]));
        let w = b.parameter(ty(vec![lit(12), lit(11008)]));
        let d = b.add_op(OpKind::Dot, vec![x, w], ty(vec![sym(1), lit(11008)]));
        let r = b.add_op(OpKind::Reduce { axis: 1 }, vec![d], ty(vec![sym(1)]));
        let e = b.add_op(OpKind::Elementwise(BinaryOp::Add), vec![r, r], ty(vec![sym(1)]));
        let g = b.finish(vec![e]);
        assert_eq!(infer_shapes(&g).unwrap(), vec![]);
    }

    #[test]
    fn dot_literal_conflict_is_shape_error() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(1), lit(12)]));
        let w = b.parameter(ty(vec![lit(16), lit(8)]));
        let d = b.add_op(OpKind::Dot, vec![x, w], ty(vec![sym(1), lit(8)]));
        let g = b.finish(vec![d]);
        let err = infer_shapes(&g).unwrap_err();
        assert!(matches!(err, ShapeError::Shape { op: OpId(2), .. }), "{err}");
    }

    #[test]
    fn reduce_axis_out_of_range() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(1)]));
        let r = b.add_op(OpKind::Reduce { axis: 1 }, vec![x], ty(vec![]));
        let g = b.finish(vec![r]);
        assert!(matches!(infer_shapes(&g), Err(ShapeError::Shape { .. })));
    }

    #[test]
    fn reshape_orients_s0_to_12_s1() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(0), lit(4096)]));
        let r = b.add_op(OpKind::DynamicReshape, vec![x], ty(vec![sym(1), lit(12), lit(4096)]));
        let g = b.finish(vec![r]);
        let facts = infer_shapes(&g).unwrap();
        assert_eq!(facts.len(), 1);
        assert_eq!(facts[0].lhs, lin(4096, 0));
        assert_eq!(facts[0].rhs, lin(49152, 1));
        let cg = derive_constraints(&g).unwrap();
        assert_eq!(cg.dump_lines(), vec!["@S0 = 12*@S1".to_string()]);
        assert_eq!(cg.basis_symbols(), [Symbol(1)].into());
    }

    #[test]
    fn tautological_reshape_adds_nothing() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(0)]));
        let r = b.add_op(OpKind::DynamicReshape, vec![x], ty(vec![sym(0)]));
        let g = b.finish(vec![r]);
        assert!(infer_shapes(&g).unwrap().is_empty());
        assert!(derive_constraints(&g).unwrap().substitutions().is_empty());
    }

    #[test]
    fn elementwise_unifies_to_smallest_symbol() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(2), lit(64)]));
        let y = b.parameter(ty(vec![sym(3), lit(64)]));
        let r = b.add_op(
            OpKind::Elementwise(BinaryOp::Mul),
            vec![x, y],
            ty(vec![sym(2), lit(64)]),
        );
        let g = b.finish(vec![r]);
        let cg = derive_constraints(&g).unwrap();
        assert_eq!(cg.dump_lines(), vec!["@S3 = 1*@S2".to_string()]);
    }

    #[test]
    fn contradictory_literal_reshape() {
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![lit(3), lit(4)]));
        let r = b.add_op(OpKind::DynamicReshape, vec![x], ty(vec![lit(16)]));
        let g = b.finish(vec![r]);
        assert!(matches!(derive_constraints(&g), Err(ShapeError::Inconsistent(_))));

        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(0), lit(4)]));
        let r = b.add_op(OpKind::DynamicReshape, vec![x], ty(vec![sym(0), lit(3)]));
        let g = b.finish(vec![r]);
        assert!(matches!(derive_constraints(&g), Err(ShapeError::Inconsistent(_))));
    }

    #[test]
    fn unorientable_equality_is_retained() {
        // 2*S2 = 3*S3: neither coefficient divides the other.
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(2), lit(2)]));
        let r = b.add_op(OpKind::DynamicReshape, vec![x], ty(vec![sym(3), lit(3)]));
        let g = b.finish(vec![r]);
        let cg = derive_constraints(&g).unwrap();
        assert!(cg.substitutions().is_empty());
        assert_eq!(cg.unoriented().len(), 1);
        let a = lin(2, 2);
        let c = lin(3, 3);
        assert_eq!(
            crate::symexpr::compare(&a, &c, &cg),
            crate::symexpr::CompareResult::DefinitelyEqual
        );
    }

    #[test]
    fn canonical_basis_examples() {
        let cg = ShapeConstraintGraph::from_substitutions([(Symbol(0), lin(12, 1))]).unwrap();
        assert_eq!(cg.substitutions()[&Symbol(0)], lin(12, 1));
        assert_eq!(canonical_basis(&cg).unwrap(), cg);

        let cg = ShapeConstraintGraph::from_substitutions([(Symbol(0), lin(12, 1)), (Symbol(1), lin(2, 2))]).unwrap();
        assert_eq!(cg.substitutions()[&Symbol(0)], lin(24, 2));
        assert_eq!(cg.substitutions()[&Symbol(1)], lin(2, 2));

        let err = ShapeConstraintGraph::from_substitutions([(Symbol(0), lin(12, 1)), (Symbol(1), lin(1, 0))]);
        assert!(matches!(err, Err(ShapeError::Inconsistent(_))));
    }

    #[test]
    fn size_exprs() {
        let cg = ShapeConstraintGraph::from_substitutions([(Symbol(0), lin(12, 1))]).unwrap();
        let none = ShapeConstraintGraph::default();
        assert_eq!(
            tensor_size_expr(&ty(vec![sym(1), lit(11008)]), &none).unwrap(),
            lin(11008, 1)
        );
        assert_eq!(
            tensor_size_expr(&ty(vec![sym(0), lit(1024)]), &cg).unwrap(),
            lin(12288, 1)
        );
        let t = TensorType::new(vec![lit(4), lit(4)], DType::F16);
        assert_eq!(tensor_size_expr(&t, &none).unwrap(), SymbolicExpr::constant(32));
    }

    #[test]
    fn nonlinear_flatten_constraint() {
        // [S0, S1] -> [S2] gives S2 -> S0*S1
        let mut b = GraphBuilder::new("g");
        let x = b.parameter(ty(vec![sym(0), sym(1)]));
        let r = b.add_op(OpKind::DynamicReshape, vec![x], ty(vec![sym(2)]));
        let g = b.finish(vec![r]);
        let cg = derive_constraints(&g).unwrap();
        assert_eq!(cg.dump_lines(), vec!["@S2 = 1*@S0*@S1".to_string()]);
    }
}
