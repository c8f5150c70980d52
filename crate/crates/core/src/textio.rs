//! Text format for dynamic-shape graphs (`.dsg`).
//!
//! ```text
//! # comment
//! graph mlp(%x: tensor<[@S0, 4096]>, %w: tensor<[4096, 1024]:f32>) {
//!   %y = dot(%x, %w) : tensor<[@S0, 1024]>
//!   %r = reduce(%y, axis=1) : tensor<[@S0]>
//!   return %r
//! }
//! ```
//!
//! Result types are mandatory since they carry the symbolic dims. The dtype
//! suffix defaults to `f16`. Symbols are declared implicitly on first use.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::graph::{BinaryOp, DType, DimSize, Graph, OpId, OpKind, OpNode, TensorType, ValueId, Violation};
use crate::remat::InstrumentedGraph;
use crate::shape::{infer_shapes, ShapeError};
use crate::symexpr::Symbol;

/// Location of a token: 1-based line/column plus byte offsets.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct SourceSpan {
    pub line: usize,
    pub column: usize,
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for SourceSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParseErrorKind {
    Syntax,
    UnknownOp,
    Arity,
    Validation,
    Shape,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParseErrorKind::Syntax => "SyntaxError",
            ParseErrorKind::UnknownOp => "UnknownOp",
            ParseErrorKind::Arity => "ArityMismatch",
            ParseErrorKind::Validation => "InvalidGraph",
            ParseErrorKind::Shape => "ShapeError",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind}: line {}, column {}: {message}", span.line, span.column)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub message: String,
    pub span: SourceSpan,
}

#[derive(Clone, PartialEq, Eq, Debug)]
enum Tok {
    Ident(String),
    Value(String),
    Sym(u32),
    Int(u64),
    Punct(char),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Value(s) => write!(f, "`%{s}`"),
            Tok::Sym(k) => write!(f, "`@S{k}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Punct(c) => write!(f, "`{c}`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
    line_start: usize,
}

impl<'a> Lexer<'a> {
    fn span_from(&self, start: usize, line: usize, line_start: usize) -> SourceSpan {
        SourceSpan {
            line,
            column: self.src[line_start..start].chars().count() + 1,
            start,
            end: self.pos,
        }
    }

    fn err(&self, start: usize, message: String) -> ParseError {
        let mut span = self.span_from(start, self.line, self.line_start);
        span.end = (start + 1).min(self.src.len()).max(start);
        ParseError {
            kind: ParseErrorKind::Syntax,
            message,
            span,
        }
    }

    fn tokens(mut self) -> Result<Vec<(Tok, SourceSpan)>, ParseError> {
        let bytes = self.src.as_bytes();
        let mut out = Vec::new();
        loop {
            while self.pos < bytes.len() {
                match bytes[self.pos] {
                    b'\n' => {
                        self.pos += 1;
                        self.line += 1;
                        self.line_start = self.pos;
                    }
                    b' ' | b'\t' | b'\r' => self.pos += 1,
                    b'#' => {
                        while self.pos < bytes.len() && bytes[self.pos] != b'\n' {
                            self.pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = self.pos;
            let (line, line_start) = (self.line, self.line_start);
            if start >= bytes.len() {
                let span = SourceSpan {
                    line,
                    column: self.src[line_start..].chars().count() + 1,
                    start,
                    end: start,
                };
                out.push((Tok::Eof, span));
                return Ok(out);
            }
            let is_word = |b: u8| b.is_ascii_alphanumeric() || b == b'_';
            let c = bytes[start];
            let tok = if c == b'%' {
                self.pos += 1;
                while self.pos < bytes.len() && is_word(bytes[self.pos]) {
                    self.pos += 1;
                }
                if self.pos == start + 1 {
                    return Err(self.err(start, "expected a value name after `%`".into()));
                }
                Tok::Value(self.src[start + 1..self.pos].to_string())
            } else if c == b'@' {
                self.pos += 1;
                while self.pos < bytes.len() && is_word(bytes[self.pos]) {
                    self.pos += 1;
                }
                let name = &self.src[start + 1..self.pos];
                match name.strip_prefix('S').and_then(|k| k.parse::<u32>().ok()) {
                    Some(k) => Tok::Sym(k),
                    None => return Err(self.err(start, format!("symbol `@{name}` must have the form `@S<k>`"))),
                }
            } else if c.is_ascii_digit() {
                while self.pos < bytes.len() && bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
                match self.src[start..self.pos].parse::<u64>() {
                    Ok(v) => Tok::Int(v),
                    Err(_) => return Err(self.err(start, "integer literal out of range".into())),
                }
            } else if c.is_ascii_alphabetic() || c == b'_' {
                while self.pos < bytes.len() && is_word(bytes[self.pos]) {
                    self.pos += 1;
                }
                Tok::Ident(self.src[start..self.pos].to_string())
            } else if b"(){}[]<>,:=".contains(&c) {
                self.pos += 1;
                Tok::Punct(c as char)
            } else {
                let ch = self.src[start..].chars().next().unwrap_or('?');
                return Err(self.err(start, format!("unexpected character `{ch}`")));
            };
            out.push((tok, self.span_from(start, line, line_start)));
        }
    }
}

/// A parsed graph plus the source span of each op (indexed by [`OpId`]).
#[derive(Debug, Clone)]
pub struct ParsedGraph {
    pub graph: Graph,
    pub op_spans: Vec<SourceSpan>,
}

impl ParsedGraph {
    pub fn span_of(&self, op: OpId) -> SourceSpan {
        self.op_spans.get(op.index()).copied().unwrap_or_default()
    }
}

struct Parser {
    toks: Vec<(Tok, SourceSpan)>,
    pos: usize,
    names: Vec<String>,
    by_name: BTreeMap<String, ValueId>,
    ops: Vec<OpNode>,
    op_spans: Vec<SourceSpan>,
    symbols: BTreeSet<Symbol>,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn next(&mut self) -> (Tok, SourceSpan) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, kind: ParseErrorKind, span: SourceSpan, message: String) -> Result<T, ParseError> {
        Err(ParseError { kind, message, span })
    }

    fn expect_punct(&mut self, c: char) -> Result<SourceSpan, ParseError> {
        let (tok, span) = self.next();
        if tok == Tok::Punct(c) {
            Ok(span)
        } else {
            self.error(ParseErrorKind::Syntax, span, format!("expected `{c}`, found {tok}"))
        }
    }

    fn expect_keyword(&mut self, kw: &str) -> Result<SourceSpan, ParseError> {
        let (tok, span) = self.next();
        match tok {
            Tok::Ident(ref s) if s == kw => Ok(span),
            _ => self.error(ParseErrorKind::Syntax, span, format!("expected `{kw}`, found {tok}")),
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.next();
            true
        } else {
            false
        }
    }

    fn define(&mut self, name: &str) -> ValueId {
        if let Some(v) = self.by_name.get(name) {
            // Redefinition keeps the id so validation can report it.
            return *v;
        }
        let v = ValueId(self.names.len() as u32);
        self.names.push(name.to_string());
        self.by_name.insert(name.to_string(), v);
        v
    }

    fn use_value(&mut self) -> Result<ValueId, ParseError> {
        let (tok, span) = self.next();
        match tok {
            Tok::Value(name) => match self.by_name.get(&name) {
                Some(v) => Ok(*v),
                None => self.error(ParseErrorKind::Syntax, span, format!("use of undefined value %{name}")),
            },
            other => self.error(ParseErrorKind::Syntax, span, format!("expected a value, found {other}")),
        }
    }

    fn parse_type(&mut self) -> Result<TensorType, ParseError> {
        self.expect_keyword("tensor")?;
        self.expect_punct('<')?;
        self.expect_punct('[')?;
        let mut dims = Vec::new();
        if !self.eat_punct(']') {
            loop {
                let (tok, span) = self.next();
                match tok {
                    Tok::Int(0) => return self.error(ParseErrorKind::Syntax, span, "literal dims must be >= 1".into()),
                    Tok::Int(v) => dims.push(DimSize::Literal(v)),
                    Tok::Sym(k) => {
                        self.symbols.insert(Symbol(k));
                        dims.push(DimSize::Symbolic(Symbol(k)));
                    }
                    other => return self.error(ParseErrorKind::Syntax, span, format!("expected a dim, found {other}")),
                }
                if self.eat_punct(']') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        let mut dtype = DType::default();
        if self.eat_punct(':') {
            let (tok, span) = self.next();
            dtype = match tok {
                Tok::Ident(ref s) if s == "f16" => DType::F16,
                Tok::Ident(ref s) if s == "f32" => DType::F32,
                Tok::Ident(ref s) if s == "i8" => DType::I8,
                other => {
                    return self.error(
                        ParseErrorKind::Syntax,
                        span,
                        format!("unknown dtype {other}, expected f16, f32 or i8"),
                    )
                }
            };
        }
        self.expect_punct('>')?;
        Ok(TensorType::new(dims, dtype))
    }

    fn push_op(&mut self, kind: OpKind, operands: Vec<ValueId>, results: Vec<(ValueId, TensorType)>, span: SourceSpan) {
        let id = OpId(self.ops.len() as u32);
        self.ops.push(OpNode {
            id,
            kind,
            operands,
            results,
        });
        self.op_spans.push(span);
    }

    fn parse_stmt(&mut self) -> Result<(), ParseError> {
        let (tok, result_span) = self.next();
        let Tok::Value(result_name) = tok else {
            return self.error(
                ParseErrorKind::Syntax,
                result_span,
                format!("expected a statement or `return`, found {tok}"),
            );
        };
        self.expect_punct('=')?;
        let (tok, op_span) = self.next();
        let Tok::Ident(mnemonic) = tok else {
            return self.error(
                ParseErrorKind::Syntax,
                op_span,
                format!("expected an op name, found {tok}"),
            );
        };
        let span = SourceSpan {
            end: op_span.end,
            ..result_span
        };
        if mnemonic == "const" {
            self.expect_punct(':')?;
            let ty = self.parse_type()?;
            let v = self.define(&result_name);
            self.push_op(OpKind::Constant, Vec::new(), vec![(v, ty)], span);
            return Ok(());
        }
        let mut kind = match mnemonic.as_str() {
            "dot" => OpKind::Dot,
            "dynamic_reshape" => OpKind::DynamicReshape,
            "reduce" => OpKind::Reduce { axis: 0 },
            "broadcast" => OpKind::Broadcast,
            "add" => OpKind::Elementwise(BinaryOp::Add),
            "mul" => OpKind::Elementwise(BinaryOp::Mul),
            _ => {
                return self.error(
                    ParseErrorKind::UnknownOp,
                    op_span,
                    format!("unknown op kind `{mnemonic}`"),
                )
            }
        };
        self.expect_punct('(')?;
        let mut operands = Vec::new();
        let mut axis = None;
        if !self.eat_punct(')') {
            loop {
                if let Tok::Ident(ref s) = *self.peek() {
                    if s == "axis" {
                        let axis_span = self.next().1;
                        self.expect_punct('=')?;
                        let (tok, span) = self.next();
                        let Tok::Int(k) = tok else {
                            return self.error(ParseErrorKind::Syntax, span, format!("expected an axis, found {tok}"));
                        };
                        if !matches!(kind, OpKind::Reduce { .. }) {
                            return self.error(
                                ParseErrorKind::Syntax,
                                axis_span,
                                format!("`{mnemonic}` takes no axis attribute"),
                            );
                        }
                        axis = Some(k as usize);
                        self.expect_punct(')')?;
                        break;
                    }
                }
                operands.push(self.use_value()?);
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        if let OpKind::Reduce { .. } = kind {
            match axis {
                Some(a) => kind = OpKind::Reduce { axis: a },
                None => {
                    return self.error(
                        ParseErrorKind::Syntax,
                        op_span,
                        "reduce requires an `axis=<k>` attribute".into(),
                    )
                }
            }
        }
        if let Some(expected) = kind.arity() {
            if operands.len() != expected {
                return self.error(
                    ParseErrorKind::Arity,
                    op_span,
                    format!("`{mnemonic}` takes {expected} operand(s), found {}", operands.len()),
                );
            }
        }
        self.expect_punct(':')?;
        let ty = self.parse_type()?;
        let v = self.define(&result_name);
        self.push_op(kind, operands, vec![(v, ty)], span);
        Ok(())
    }

    fn parse_graph(&mut self) -> Result<String, ParseError> {
        self.expect_keyword("graph")?;
        let (tok, span) = self.next();
        let Tok::Ident(name) = tok else {
            return self.error(
                ParseErrorKind::Syntax,
                span,
                format!("expected a graph name, found {tok}"),
            );
        };
        self.expect_punct('(')?;
        if !self.eat_punct(')') {
            loop {
                let (tok, span) = self.next();
                let Tok::Value(pname) = tok else {
                    return self.error(
                        ParseErrorKind::Syntax,
                        span,
                        format!("expected a parameter, found {tok}"),
                    );
                };
                self.expect_punct(':')?;
                let ty = self.parse_type()?;
                let v = self.define(&pname);
                self.push_op(OpKind::Parameter, Vec::new(), vec![(v, ty)], span);
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        self.expect_punct('{')?;
        loop {
            if let Tok::Ident(ref s) = *self.peek() {
                if s == "return" {
                    break;
                }
            }
            self.parse_stmt()?;
        }
        let ret_span = self.expect_keyword("return")?;
        let mut outputs = Vec::new();
        if let Tok::Value(_) = self.peek() {
            loop {
                outputs.push(self.use_value()?);
                if !self.eat_punct(',') {
                    break;
                }
            }
        }
        self.expect_punct('}')?;
        let (tok, span) = self.next();
        if tok != Tok::Eof {
            return self.error(ParseErrorKind::Syntax, span, format!("unexpected {tok} after graph"));
        }
        self.push_op(OpKind::Return, outputs, Vec::new(), ret_span);
        Ok(name)
    }
}

/// Parses, validates and shape-checks a graph, keeping op spans for
/// diagnostics reported by later passes.
pub fn parse_with_spans(text: &str) -> Result<ParsedGraph, ParseError> {
    let toks = Lexer {
        src: text,
        pos: 0,
        line: 1,
        line_start: 0,
    }
    .tokens()?;
    let mut p = Parser {
        toks,
        pos: 0,
        names: Vec::new(),
        by_name: BTreeMap::new(),
        ops: Vec::new(),
        op_spans: Vec::new(),
        symbols: BTreeSet::new(),
    };
    let name = p.parse_graph()?;
    let parsed = ParsedGraph {
        graph: Graph::from_parts(name, p.ops, p.symbols, p.names),
        op_spans: p.op_spans,
    };
    if let Err(violations) = parsed.graph.validate() {
        let first = &violations[0];
        let span = match first {
            Violation::MultipleDefinitions { value } => parsed
                .graph
                .ops()
                .iter()
                .rev()
                .find(|op| op.results.iter().any(|(v, _)| parsed.graph.value_name(*v) == *value))
                .map(|op| parsed.span_of(op.id))
                .unwrap_or_default(),
            Violation::UndefinedOperand { op, .. }
            | Violation::UndeclaredSymbol { op, .. }
            | Violation::ZeroDim { op }
            | Violation::Arity { op, .. }
            | Violation::ResultCount { op, .. } => parsed.span_of(*op),
            Violation::ReturnCount { .. } | Violation::Cycle => parsed.op_spans[0],
        };
        let message = violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        return Err(ParseError {
            kind: ParseErrorKind::Validation,
            message,
            span,
        });
    }
    if let Err(e) = infer_shapes(&parsed.graph) {
        let span = match &e {
            ShapeError::Shape { op, .. } => parsed.span_of(*op),
            _ => SourceSpan::default(),
        };
        return Err(ParseError {
            kind: ParseErrorKind::Shape,
            message: e.to_string(),
            span,
        });
    }
    Ok(parsed)
}

pub fn parse(text: &str) -> Result<Graph, ParseError> {
    parse_with_spans(text).map(|p| p.graph)
}

/// Canonical text: parameters first, then one statement per line in
/// topological order, with values renumbered `%0, %1, ...` in that order.
pub fn print(graph: &Graph) -> String {
    let order = graph
        .topo_order()
        .unwrap_or_else(|_| graph.ops().iter().map(|op| op.id).collect());
    let mut number: BTreeMap<ValueId, usize> = BTreeMap::new();
    let params: Vec<&OpNode> = graph.ops().iter().filter(|op| op.kind == OpKind::Parameter).collect();
    for op in &params {
        for (v, _) in &op.results {
            let n = number.len();
            number.entry(*v).or_insert(n);
        }
    }
    let body: Vec<&OpNode> = order
        .iter()
        .map(|id| graph.op(*id))
        .filter(|op| op.kind != OpKind::Parameter && op.kind != OpKind::Return)
        .collect();
    for op in &body {
        for (v, _) in &op.results {
            let n = number.len();
            number.entry(*v).or_insert(n);
        }
    }
    let name = |v: &ValueId| match number.get(v) {
        Some(n) => format!("%{n}"),
        None => graph.value_name(*v),
    };

    let mut out = String::new();
    let header: Vec<String> = params
        .iter()
        .flat_map(|op| op.results.iter().map(|(v, t)| format!("{}: {t}", name(v))))
        .collect();
    out.push_str(&format!("graph {}({}) {{\n", graph.name, header.join(", ")));
    for op in body {
        out.push_str(&format!("  {}\n", statement(op, &name)));
    }
    let outs: Vec<String> = graph.outputs().iter().map(name).collect();
    if outs.is_empty() {
        out.push_str("  return\n}\n");
    } else {
        out.push_str(&format!("  return {}\n}}\n", outs.join(", ")));
    }
    out
}

/// One op as a statement, without indentation or newline.
fn statement(op: &OpNode, name: &dyn Fn(&ValueId) -> String) -> String {
    let (v, ty) = &op.results[0];
    if op.kind == OpKind::Constant {
        return format!("{} = const : {ty}", name(v));
    }
    let mut args: Vec<String> = op.operands.iter().map(name).collect();
    if let OpKind::Reduce { axis } = op.kind {
        args.push(format!("axis={axis}"));
    }
    format!("{} = {}({}) : {ty}", name(v), op.kind.mnemonic(), args.join(", "))
}

/// Instrumented schedule with `remat.evict` after every op and `remat.regen`
/// guards before consumers. Values keep their source names.
pub fn print_instrumented(graph: &Graph, inst: &InstrumentedGraph) -> String {
    let name = |v: &ValueId| graph.value_name(*v);
    let names = |vs: &mut dyn Iterator<Item = ValueId>| vs.map(|v| graph.value_name(v)).collect::<Vec<_>>().join(", ");
    let header: Vec<String> = graph
        .ops()
        .iter()
        .filter(|op| op.kind == OpKind::Parameter)
        .map(|op| format!("{}: {}", name(&op.results[0].0), op.results[0].1))
        .collect();
    let mut out = format!("graph {}({}) {{\n", graph.name, header.join(", "));
    for v in &inst.schedule.initial {
        if graph.producer(*v).is_some_and(|p| p.kind == OpKind::Constant) {
            out.push_str(&format!("  {}\n", statement(graph.producer(*v).unwrap(), &name)));
        }
    }
    for (p, step) in inst.schedule.steps.iter().enumerate() {
        for g in inst.guards_before(p) {
            let mut methods = vec!["reload".to_string()];
            if let Some(re) = inst.specs.get(&g.value).and_then(|s| s.recompute.as_ref()) {
                let mut results = re.ops.iter().flat_map(|o| graph.op(*o).results.iter().map(|(r, _)| *r));
                methods.push(format!("recompute=[{}]", names(&mut results)));
            }
            out.push_str(&format!(
                "  remat.regen {} {{{}}}\n",
                name(&g.value),
                methods.join(", ")
            ));
        }
        out.push_str(&format!("  {}\n", statement(graph.op(step.op), &name)));
        let mut cands = inst.evicts[p].candidates.iter().copied();
        out.push_str(&format!("  remat.evict [{}]\n", names(&mut cands)));
    }
    let mut outs = graph.outputs().iter().copied();
    out.push_str(&format!("  return {}\n}}\n", names(&mut outs)).replace("return \n", "return\n"));
    out
}
