//! An embedded SQL engine with a SQLite-style register bytecode, a resumable
//! interpreter with hot-loop detection, and a trace recorder/optimizer that
//! eliminates redundant dynamic-type checks and inlines registered functions
//! across the host boundary.
//!
//! The crate follows the execution pipeline:
//!
//! - [`value`]: the dynamically-typed value cell and its flags bitmask
//! - [`storage`]: in-memory tables, cursors, persistence, CSV ingestion
//! - [`compiler`]: SQL-subset parser and bytecode code generator
//! - [`vm`]: the opcode dispatcher with hot-loop counters
//! - [`trace`]: trace recording, optimization, and guarded execution
//! - [`hostapi`]: connections, host functions, aggregates, reentrancy
//! - [`bench`]: micro-benchmark suites with crossing/op instrumentation

pub mod bench;
pub mod compiler;
pub mod hostapi;
pub mod storage;
pub mod trace;
pub mod value;
pub mod vm;

pub use bench::{BenchReport, CrossingCounters, RunMetrics, Suite};
pub use compiler::{explain, BindError, Program, SyntaxError};
pub use hostapi::{
    eval_scripted, AggFinalImpl, AggStepImpl, Connection, EngineError, FunctionImpl, HostError,
    ScriptedExpr,
};
pub use storage::{Affinity, ColumnSchema, Cursor, Database, StorageError};
pub use value::{
    apply_real_affinity, arith_with_overflow, cast_to_text_cached, decode_column_result,
    encode_column_result, ArithKind, ValueCell, FLAG_INT, FLAG_NULL, FLAG_REAL, FLAG_STR,
};
pub use vm::{ErrorKind, ExecMode, Statement, StepStatus, TraceSummary};
