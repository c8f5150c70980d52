//! Text to constraints to schedule to instrumented graph, in one place.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::Graph;
use crate::remat::{instrument, InstrumentedGraph};
use crate::scheduler::{schedule, Schedule, ScheduleError};
use crate::shape::{derive_constraints, ShapeConstraintGraph, ShapeError};
use crate::sim::{bind, Binding, SimError};
use crate::symexpr::{ExprError, Symbol};
use crate::textio::{parse_with_spans, ParseError, SourceSpan};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{error}")]
    Shape {
        error: ShapeError,
        span: Option<SourceSpan>,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

impl From<ShapeError> for Error {
    fn from(error: ShapeError) -> Self {
        Error::Shape { error, span: None }
    }
}

/// A parsed graph with its derived constraint system.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub graph: Graph,
    pub spans: Vec<SourceSpan>,
    pub constraints: ShapeConstraintGraph,
}

impl Analysis {
    pub fn from_text(text: &str) -> Result<Self, Error> {
        let parsed = parse_with_spans(text)?;
        let constraints = derive_constraints(&parsed.graph).map_err(|error| {
            let span = match &error {
                ShapeError::Shape { op, .. } => Some(parsed.span_of(*op)),
                _ => None,
            };
            Error::Shape { error, span }
        })?;
        Ok(Analysis {
            graph: parsed.graph,
            spans: parsed.op_spans,
            constraints,
        })
    }

    /// For graphs built in code; structural problems surface as shape errors.
    pub fn from_graph(graph: Graph) -> Result<Self, Error> {
        let constraints = derive_constraints(&graph)?;
        Ok(Analysis {
            graph,
            spans: Vec::new(),
            constraints,
        })
    }

    pub fn schedule(&self) -> Result<Schedule, Error> {
        Ok(schedule(&self.graph, &self.constraints)?)
    }

    pub fn instrument(&self, schedule: &Schedule) -> Result<InstrumentedGraph, Error> {
        Ok(instrument(&self.graph, schedule, &self.constraints)?)
    }

    pub fn bind(&self, raw: &BTreeMap<Symbol, i64>) -> Result<Binding, Error> {
        Ok(bind(&self.constraints, raw)?)
    }
}
