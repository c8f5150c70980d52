//! Memory optimization for dynamic-shape tensor graphs driven by symbolic
//! shapes: shape analysis, memory-aware scheduling, rematerialization
//! instrumentation, and a runtime simulator that makes the final
//! evict/regenerate decisions under a byte budget.

pub mod graph;
pub mod pipeline;
pub mod remat;
pub mod scheduler;
pub mod shape;
pub mod sim;
pub mod symexpr;
pub mod textio;

pub use graph::{BinaryOp, DType, DimSize, Graph, GraphBuilder, OpId, OpKind, OpNode, TensorType, ValueId};
pub use pipeline::{Analysis, Error};
pub use remat::{instrument, InstrumentedGraph, RegenSpec};
pub use scheduler::{schedule, Schedule};
pub use shape::{derive_constraints, ShapeConstraintGraph, ShapeError};
pub use sim::{bind, simulate, Binding, CostModel, SimReport};
pub use symexpr::{compare, CompareResult, Env, Symbol, SymbolicExpr};
pub use textio::{parse, print};
