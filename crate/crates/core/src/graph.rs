//! The dynamic-shape tensor graph.
//!
//! Every op result is a fresh SSA value. Parameters and constants are
//! modeled as zero-operand source ops; the single `Return` op lists the
//! graph outputs as its operands and produces nothing.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::symexpr::{ExprError, Monomial, Symbol, SymbolicExpr};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
pub struct OpId(pub u32);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize)]
pub struct ValueId(pub u32);

impl OpId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ValueId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum DimSize {
    Literal(u64),
    Symbolic(Symbol),
}

impl DimSize {
    pub fn to_expr(self) -> SymbolicExpr {
        match self {
            DimSize::Literal(v) => SymbolicExpr::constant(v as i128),
            DimSize::Symbolic(s) => SymbolicExpr::symbol(s),
        }
    }

    pub fn is_one(self) -> bool {
        self == DimSize::Literal(1)
    }
}

impl fmt::Display for DimSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DimSize::Literal(v) => write!(f, "{v}"),
            DimSize::Symbolic(s) => write!(f, "@{s}"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub enum DType {
    #[default]
    F16,
    F32,
    I8,
}

impl DType {
    pub fn elem_bytes(self) -> u64 {
        match self {
            DType::F16 => 2,
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F16 => "f16",
            DType::F32 => "f32",
            DType::I8 => "i8",
        }
    }
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct TensorType {
    pub dims: Vec<DimSize>,
    pub dtype: DType,
}

impl TensorType {
    pub fn new(dims: Vec<DimSize>, dtype: DType) -> Self {
        TensorType { dims, dtype }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn elem_bytes(&self) -> u64 {
        self.dtype.elem_bytes()
    }

    /// Element count as a polynomial; `1` for rank-0 tensors.
    pub fn num_elements_expr(&self) -> Result<SymbolicExpr, ExprError> {
        let mut coeff: i128 = 1;
        let mut syms = Vec::new();
        for d in &self.dims {
            match *d {
                DimSize::Literal(v) => coeff = coeff.checked_mul(v as i128).ok_or(ExprError::Overflow)?,
                DimSize::Symbolic(s) => syms.push(s),
            }
        }
        Ok(SymbolicExpr::term(coeff, Monomial::from_symbols(syms)))
    }

    /// `elem_bytes * prod(dims)`, not yet rewritten onto a constraint basis.
    pub fn size_expr(&self) -> Result<SymbolicExpr, ExprError> {
        self.num_elements_expr()?.checked_scale(self.elem_bytes() as i128)
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> + '_ {
        self.dims.iter().filter_map(|d| match d {
            DimSize::Symbolic(s) => Some(*s),
            DimSize::Literal(_) => None,
        })
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("tensor<[")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")?;
        if self.dtype != DType::default() {
            write!(f, ":{}", self.dtype.name())?;
        }
        f.write_str(">")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum OpKind {
    Parameter,
    Constant,
    Dot,
    DynamicReshape,
    Reduce { axis: usize },
    Broadcast,
    Elementwise(BinaryOp),
    Return,
}

impl OpKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            OpKind::Parameter => "parameter",
            OpKind::Constant => "const",
            OpKind::Dot => "dot",
            OpKind::DynamicReshape => "dynamic_reshape",
            OpKind::Reduce { .. } => "reduce",
            OpKind::Broadcast => "broadcast",
            OpKind::Elementwise(BinaryOp::Add) => "add",
            OpKind::Elementwise(BinaryOp::Mul) => "mul",
            OpKind::Return => "return",
        }
    }

    /// Parameters and constants: resident for the whole run, never scheduled.
    pub fn is_source(self) -> bool {
        matches!(self, OpKind::Parameter | OpKind::Constant)
    }

    pub fn is_compute(self) -> bool {
        !self.is_source() && self != OpKind::Return
    }

    /// Expected operand count, `None` for variadic.
    pub fn arity(self) -> Option<usize> {
        match self {
            OpKind::Parameter | OpKind::Constant => Some(0),
            OpKind::DynamicReshape | OpKind::Reduce { .. } | OpKind::Broadcast => Some(1),
            OpKind::Dot | OpKind::Elementwise(_) => Some(2),
            OpKind::Return => None,
        }
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OpNode {
    pub id: OpId,
    pub kind: OpKind,
    pub operands: Vec<ValueId>,
    pub results: Vec<(ValueId, TensorType)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("NotFound: value {0} is not defined in the graph")]
    NotFound(String),
    #[error("CyclicGraph: the graph contains a cycle")]
    CyclicGraph,
}

/// One problem found by [`Graph::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    MultipleDefinitions { value: String },
    UndefinedOperand { op: OpId, value: String },
    UndeclaredSymbol { op: OpId, symbol: Symbol },
    ZeroDim { op: OpId },
    Arity { op: OpId, expected: usize, found: usize },
    ResultCount { op: OpId, found: usize },
    ReturnCount { found: usize },
    Cycle,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MultipleDefinitions { value } => {
                write!(f, "multiple definitions of {value}")
            }
            Violation::UndefinedOperand { op, value } => {
                write!(f, "op #{} uses undefined value {value}", op.0)
            }
            Violation::UndeclaredSymbol { op, symbol } => {
                write!(f, "undeclared symbol @{symbol} in op #{}", op.0)
            }
            Violation::ZeroDim { op } => write!(f, "zero-size literal dim in op #{}", op.0),
            Violation::Arity { op, expected, found } => {
                write!(f, "op #{} expects {expected} operands, found {found}", op.0)
            }
            Violation::ResultCount { op, found } => {
                write!(f, "op #{} must produce exactly one result, found {found}", op.0)
            }
            Violation::ReturnCount { found } => {
                write!(f, "graph must have exactly one return, found {found}")
            }
            Violation::Cycle => f.write_str("graph contains a cycle"),
        }
    }
}

/// Immutable dynamic-shape computation graph.
///
/// `ops[i].id == OpId(i)`; `names[v]` is the printable name of value `v`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Graph {
    pub name: String,
    ops: Vec<OpNode>,
    symbols: BTreeSet<Symbol>,
    names: Vec<String>,
}

impl Graph {
    /// Assembles a graph without checking it; see [`Graph::validate`].
    pub fn from_parts(
        name: impl Into<String>,
        ops: Vec<OpNode>,
        symbols: BTreeSet<Symbol>,
        names: Vec<String>,
    ) -> Self {
        debug_assert!(ops.iter().enumerate().all(|(i, op)| op.id.index() == i));
        Graph {
            name: name.into(),
            ops,
            symbols,
            names,
        }
    }

    pub fn ops(&self) -> &[OpNode] {
        &self.ops
    }

    pub fn op(&self, id: OpId) -> &OpNode {
        &self.ops[id.index()]
    }

    pub fn symbols(&self) -> &BTreeSet<Symbol> {
        &self.symbols
    }

    pub fn num_values(&self) -> usize {
        self.names.len()
    }

    pub fn value_name(&self, v: ValueId) -> String {
        match self.names.get(v.index()) {
            Some(n) => format!("%{n}"),
            None => format!("%<{}>", v.0),
        }
    }

    pub fn value_by_name(&self, name: &str) -> Option<ValueId> {
        let name = name.strip_prefix('%').unwrap_or(name);
        self.names.iter().position(|n| n == name).map(|i| ValueId(i as u32))
    }

    pub fn parameters(&self) -> Vec<ValueId> {
        self.ops
            .iter()
            .filter(|op| op.kind == OpKind::Parameter)
            .flat_map(|op| op.results.iter().map(|(v, _)| *v))
            .collect()
    }

    pub fn return_op(&self) -> Option<&OpNode> {
        self.ops.iter().find(|op| op.kind == OpKind::Return)
    }

    pub fn outputs(&self) -> &[ValueId] {
        self.return_op().map(|op| op.operands.as_slice()).unwrap_or(&[])
    }

    pub fn is_output(&self, v: ValueId) -> bool {
        self.outputs().contains(&v)
    }

    /// The op defining `v` (the first one, if the graph is malformed).
    pub fn producer(&self, v: ValueId) -> Option<&OpNode> {
        self.ops.iter().find(|op| op.results.iter().any(|(r, _)| *r == v))
    }

    pub fn value_type(&self, v: ValueId) -> Option<&TensorType> {
        self.producer(v)
            .and_then(|op| op.results.iter().find(|(r, _)| *r == v))
            .map(|(_, t)| t)
    }

    /// True for parameter and constant values.
    pub fn is_source_value(&self, v: ValueId) -> bool {
        self.producer(v).is_some_and(|op| op.kind.is_source())
    }

    /// Ops listing `v` among their operands.
    pub fn users(&self, v: ValueId) -> Result<BTreeSet<OpId>, GraphError> {
        if self.producer(v).is_none() {
            return Err(GraphError::NotFound(self.value_name(v)));
        }
        Ok(self
            .ops
            .iter()
            .filter(|op| op.operands.contains(&v))
            .map(|op| op.id)
            .collect())
    }

    /// Producer lookup table for every defined value.
    pub fn def_map(&self) -> BTreeMap<ValueId, OpId> {
        let mut defs = BTreeMap::new();
        for op in &self.ops {
            for (v, _) in &op.results {
                defs.entry(*v).or_insert(op.id);
            }
        }
        defs
    }

    /// Kahn's algorithm; among ready ops the smallest id goes first.
    pub fn topo_order(&self) -> Result<Vec<OpId>, GraphError> {
        let defs = self.def_map();
        let mut indegree = vec![0usize; self.ops.len()];
        let mut successors: Vec<Vec<OpId>> = vec![Vec::new(); self.ops.len()];
        for op in &self.ops {
            let preds: BTreeSet<OpId> = op.operands.iter().filter_map(|v| defs.get(v).copied()).collect();
            indegree[op.id.index()] = preds.len();
            for p in preds {
                successors[p.index()].push(op.id);
            }
        }
        let mut ready: BinaryHeap<Reverse<OpId>> = self
            .ops
            .iter()
            .filter(|op| indegree[op.id.index()] == 0)
            .map(|op| Reverse(op.id))
            .collect();
        let mut order = Vec::with_capacity(self.ops.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for s in &successors[id.index()] {
                indegree[s.index()] -= 1;
                if indegree[s.index()] == 0 {
                    ready.push(Reverse(*s));
                }
            }
        }
        if order.len() != self.ops.len() {
            return Err(GraphError::CyclicGraph);
        }
        Ok(order)
    }

    /// Reports every structural problem, not just the first.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        let mut defined: BTreeMap<ValueId, usize> = BTreeMap::new();
        for op in &self.ops {
            for (v, _) in &op.results {
                *defined.entry(*v).or_default() += 1;
            }
        }
        for (v, n) in &defined {
            if *n > 1 {
                violations.push(Violation::MultipleDefinitions {
                    value: self.value_name(*v),
                });
            }
        }
        let mut returns = 0;
        for op in &self.ops {
            if op.kind == OpKind::Return {
                returns += 1;
                if !op.results.is_empty() {
                    violations.push(Violation::ResultCount {
                        op: op.id,
                        found: op.results.len(),
                    });
                }
            } else if op.results.len() != 1 {
                violations.push(Violation::ResultCount {
                    op: op.id,
                    found: op.results.len(),
                });
            }
            if let Some(expected) = op.kind.arity() {
                if op.operands.len() != expected {
                    violations.push(Violation::Arity {
                        op: op.id,
                        expected,
                        found: op.operands.len(),
                    });
                }
            }
            for v in &op.operands {
                if !defined.contains_key(v) {
                    violations.push(Violation::UndefinedOperand {
                        op: op.id,
                        value: self.value_name(*v),
                    });
                }
            }
            for (_, ty) in &op.results {
                for sym in ty.symbols() {
                    if !self.symbols.contains(&sym) {
                        violations.push(Violation::UndeclaredSymbol { op: op.id, symbol: sym });
                    }
                }
                if ty.dims.contains(&DimSize::Literal(0)) {
                    violations.push(Violation::ZeroDim { op: op.id });
                }
            }
        }
        if returns != 1 {
            violations.push(Violation::ReturnCount { found: returns });
        }
        if self.topo_order().is_err() {
            violations.push(Violation::Cycle);
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }
}

/// Incremental construction of a [`Graph`] in definition order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    name: String,
    ops: Vec<OpNode>,
    symbols: BTreeSet<Symbol>,
    names: Vec<String>,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>) -> Self {
        GraphBuilder {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn declare_symbol(&mut self, sym: Symbol) {
        self.symbols.insert(sym);
    }

    /// Allocates a fresh value id; names default to the id number.
    pub fn new_value(&mut self, name: Option<&str>) -> ValueId {
        let id = ValueId(self.names.len() as u32);
        self.names.push(name.map_or_else(|| id.0.to_string(), str::to_string));
        id
    }

    /// Appends an op whose results are already allocated.
    pub fn push_op(&mut self, kind: OpKind, operands: Vec<ValueId>, results: Vec<(ValueId, TensorType)>) -> OpId {
        for (_, ty) in &results {
            self.symbols.extend(ty.symbols());
        }
        let id = OpId(self.ops.len() as u32);
        self.ops.push(OpNode {
            id,
            kind,
            operands,
            results,
        });
        id
    }

    pub fn add_op(&mut self, kind: OpKind, operands: Vec<ValueId>, ty: TensorType) -> ValueId {
        let v = self.new_value(None);
        self.push_op(kind, operands, vec![(v, ty)]);
        v
    }

    pub fn parameter(&mut self, ty: TensorType) -> ValueId {
        self.add_op(OpKind::Parameter, Vec::new(), ty)
    }

    pub fn finish(mut self, outputs: Vec<ValueId>) -> Graph {
        self.push_op(OpKind::Return, outputs, Vec::new());
        self.build()
    }

    /// Builds without adding a return op.
    pub fn build(self) -> Graph {
        Graph::from_parts(self.name, self.ops, self.symbols, self.names)
    }
}
