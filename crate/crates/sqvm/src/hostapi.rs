//! The host-facing connection API: query execution, registration of scalar
//! functions and aggregates, and reentrant callbacks.
//!
//! A registered implementation is either *opaque* (a native closure the
//! engine can only call) or *scripted* (a [`ScriptedExpr`] the engine can
//! interpret itself, which lets the trace recorder inline the call instead of
//! leaving an opaque boundary in the trace). Host callbacks may re-enter the
//! connection: a function body can prepare and step further statements on the
//! same connection to arbitrary depth.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::rc::Rc;

use crate::bench::{CrossingCounters, RunMetrics};
use crate::compiler::{
    self, codegen, parser, BindError, CallableKind, FunctionResolver, SyntaxError,
};
use crate::storage::{ColumnSchema, Database, SharedDb, StorageError};
use crate::value::{arith_with_overflow, ArithKind, ValueCell};
use crate::vm::{DdlAction, ErrorKind, ExecMode, JitState, Statement, StepStatus, TraceSummary};

/// Default cap on a packed record's payload size (1 GiB).
pub const DEFAULT_RECORD_SIZE_LIMIT: u64 = 1 << 30;

/// Failure reported by a host-registered implementation; surfaces to the
/// statement as an `AbortDueToError` status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostError {
    pub message: String,
}

impl HostError {
    pub fn new(message: impl Into<String>) -> Self {
        HostError {
            message: message.into(),
        }
    }
}

impl fmt::Display for HostError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "host error: {}", self.message)
    }
}

impl std::error::Error for HostError {}

/// Top-level error for the host API surface.
#[derive(Debug, Clone)]
pub enum EngineError {
    Syntax(SyntaxError),
    Bind(BindError),
    Storage(StorageError),
    Usage(String),
    /// A statement stopped with an error status while being driven to
    /// completion.
    Exec(ErrorKind, String),
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::Syntax(e) => e.fmt(f),
            EngineError::Bind(e) => e.fmt(f),
            EngineError::Storage(e) => e.fmt(f),
            EngineError::Usage(m) => write!(f, "usage error: {m}"),
            EngineError::Exec(kind, m) => write!(f, "execution error ({kind:?}): {m}"),
        }
    }
}

impl std::error::Error for EngineError {}

impl From<SyntaxError> for EngineError {
    fn from(e: SyntaxError) -> Self {
        EngineError::Syntax(e)
    }
}

impl From<BindError> for EngineError {
    fn from(e: BindError) -> Self {
        EngineError::Bind(e)
    }
}

impl From<StorageError> for EngineError {
    fn from(e: StorageError) -> Self {
        EngineError::Storage(e)
    }
}

/// Expression tree for engine-interpretable ("inlinable") implementations.
///
/// This is the artifact's stand-in for implementing a function in the
/// engine's own language rather than behind an opaque native pointer; the
/// trace recorder inlines scripted calls instead of emitting opaque ones.
#[derive(Clone, Debug, PartialEq)]
pub enum ScriptedExpr {
    Const(ValueCell),
    /// 0-based argument reference.
    Arg(usize),
    /// The aggregate accumulator; only valid in aggregate steps/finalizers.
    Acc,
    Add(Box<ScriptedExpr>, Box<ScriptedExpr>),
    Sub(Box<ScriptedExpr>, Box<ScriptedExpr>),
    Mul(Box<ScriptedExpr>, Box<ScriptedExpr>),
    Div(Box<ScriptedExpr>, Box<ScriptedExpr>),
    Neg(Box<ScriptedExpr>),
    Abs(Box<ScriptedExpr>),
    Lt(Box<ScriptedExpr>, Box<ScriptedExpr>),
    Le(Box<ScriptedExpr>, Box<ScriptedExpr>),
    Eq(Box<ScriptedExpr>, Box<ScriptedExpr>),
    IfThenElse(Box<ScriptedExpr>, Box<ScriptedExpr>, Box<ScriptedExpr>),
    ToReal(Box<ScriptedExpr>),
}

impl ScriptedExpr {
    /// Validate argument indices against the declared arity and reject `acc`
    /// outside aggregate contexts.
    pub fn validate(&self, n_args: usize, allow_acc: bool) -> Result<(), String> {
        match self {
            ScriptedExpr::Const(_) => Ok(()),
            ScriptedExpr::Arg(i) => {
                if *i < n_args {
                    Ok(())
                } else {
                    Err(format!("arg {i} out of range for arity {n_args}"))
                }
            }
            ScriptedExpr::Acc => {
                if allow_acc {
                    Ok(())
                } else {
                    Err("acc is only valid in aggregate expressions".into())
                }
            }
            ScriptedExpr::Add(a, b)
            | ScriptedExpr::Sub(a, b)
            | ScriptedExpr::Mul(a, b)
            | ScriptedExpr::Div(a, b)
            | ScriptedExpr::Lt(a, b)
            | ScriptedExpr::Le(a, b)
            | ScriptedExpr::Eq(a, b) => {
                a.validate(n_args, allow_acc)?;
                b.validate(n_args, allow_acc)
            }
            ScriptedExpr::Neg(a) | ScriptedExpr::Abs(a) | ScriptedExpr::ToReal(a) => {
                a.validate(n_args, allow_acc)
            }
            ScriptedExpr::IfThenElse(c, t, e) => {
                c.validate(n_args, allow_acc)?;
                t.validate(n_args, allow_acc)?;
                e.validate(n_args, allow_acc)
            }
        }
    }

    /// Parse the compact prefix text form, e.g.
    /// `(if (lt (arg 0) (const 0)) (neg (arg 0)) (arg 0))`.
    pub fn parse(text: &str) -> Result<ScriptedExpr, String> {
        let mut toks = Vec::new();
        let mut cur = String::new();
        for c in text.chars() {
            match c {
                '(' | ')' => {
                    if !cur.is_empty() {
                        toks.push(std::mem::take(&mut cur));
                    }
                    toks.push(c.to_string());
                }
                c if c.is_whitespace() => {
                    if !cur.is_empty() {
                        toks.push(std::mem::take(&mut cur));
                    }
                }
                c => cur.push(c),
            }
        }
        if !cur.is_empty() {
            toks.push(cur);
        }
        let mut pos = 0usize;
        let expr = parse_prefix(&toks, &mut pos)?;
        if pos != toks.len() {
            return Err("trailing tokens after expression".into());
        }
        Ok(expr)
    }
}

fn parse_prefix(toks: &[String], pos: &mut usize) -> Result<ScriptedExpr, String> {
    let tok = toks.get(*pos).ok_or("unexpected end of expression")?;
    if tok == "acc" {
        *pos += 1;
        return Ok(ScriptedExpr::Acc);
    }
    if tok != "(" {
        return Err(format!("expected '(' or 'acc', found '{tok}'"));
    }
    *pos += 1;
    let head = toks.get(*pos).ok_or("missing operator")?.clone();
    *pos += 1;
    let mut args = Vec::new();
    if head == "arg" || head == "const" {
        let lit = toks.get(*pos).ok_or("missing literal")?.clone();
        *pos += 1;
        expect_rparen(toks, pos)?;
        return if head == "arg" {
            let i = lit
                .parse::<usize>()
                .map_err(|_| format!("bad arg index '{lit}'"))?;
            Ok(ScriptedExpr::Arg(i))
        } else if lit == "null" {
            Ok(ScriptedExpr::Const(ValueCell::null()))
        } else if let Ok(i) = lit.parse::<i64>() {
            Ok(ScriptedExpr::Const(ValueCell::int(i)))
        } else if let Ok(r) = lit.parse::<f64>() {
            Ok(ScriptedExpr::Const(ValueCell::real(r)))
        } else if lit.starts_with('\'') && lit.ends_with('\'') && lit.len() >= 2 {
            Ok(ScriptedExpr::Const(ValueCell::text(&lit[1..lit.len() - 1])))
        } else {
            Err(format!("bad literal '{lit}'"))
        };
    }
    while toks.get(*pos).map(String::as_str) != Some(")") {
        args.push(parse_prefix(toks, pos)?);
    }
    *pos += 1; // consume ')'
    let two =
        |args: &mut Vec<ScriptedExpr>| -> Result<(Box<ScriptedExpr>, Box<ScriptedExpr>), String> {
            if args.len() != 2 {
                return Err(format!("operator expects 2 operands, got {}", args.len()));
            }
            let b = Box::new(args.pop().unwrap());
            let a = Box::new(args.pop().unwrap());
            Ok((a, b))
        };
    let one = |args: &mut Vec<ScriptedExpr>| -> Result<Box<ScriptedExpr>, String> {
        if args.len() != 1 {
            return Err(format!("operator expects 1 operand, got {}", args.len()));
        }
        Ok(Box::new(args.pop().unwrap()))
    };
    match head.as_str() {
        "add" => two(&mut args).map(|(a, b)| ScriptedExpr::Add(a, b)),
        "sub" => two(&mut args).map(|(a, b)| ScriptedExpr::Sub(a, b)),
        "mul" => two(&mut args).map(|(a, b)| ScriptedExpr::Mul(a, b)),
        "div" => two(&mut args).map(|(a, b)| ScriptedExpr::Div(a, b)),
        "lt" => two(&mut args).map(|(a, b)| ScriptedExpr::Lt(a, b)),
        "le" => two(&mut args).map(|(a, b)| ScriptedExpr::Le(a, b)),
        "eq" => two(&mut args).map(|(a, b)| ScriptedExpr::Eq(a, b)),
        "neg" => one(&mut args).map(ScriptedExpr::Neg),
        "abs" => one(&mut args).map(ScriptedExpr::Abs),
        "to_real" => one(&mut args).map(ScriptedExpr::ToReal),
        "if" => {
            if args.len() != 3 {
                return Err(format!("if expects 3 operands, got {}", args.len()));
            }
            let e = Box::new(args.pop().unwrap());
            let t = Box::new(args.pop().unwrap());
            let c = Box::new(args.pop().unwrap());
            Ok(ScriptedExpr::IfThenElse(c, t, e))
        }
        other => Err(format!("unknown operator '{other}'")),
    }
}

fn expect_rparen(toks: &[String], pos: &mut usize) -> Result<(), String> {
    if toks.get(*pos).map(String::as_str) == Some(")") {
        *pos += 1;
        Ok(())
    } else {
        Err("expected ')'".into())
    }
}

fn truthy(cell: &ValueCell) -> bool {
    if cell.is_null() {
        false
    } else if cell.is_int() {
        cell.as_int() != 0
    } else if cell.is_real() {
        cell.as_real() != 0.0
    } else {
        false
    }
}

use crate::value::compare_cells as cmp_cells;

/// Evaluate a scripted expression. Arithmetic uses the engine's
/// overflow-to-real rules; NULL operands propagate NULL; division by zero
/// yields NULL.
pub fn eval_scripted(
    expr: &ScriptedExpr,
    args: &[ValueCell],
    acc: Option<&ValueCell>,
) -> ValueCell {
    match expr {
        ScriptedExpr::Const(c) => c.clone(),
        ScriptedExpr::Arg(i) => args.get(*i).cloned().unwrap_or_else(ValueCell::null),
        ScriptedExpr::Acc => acc.cloned().unwrap_or_else(ValueCell::null),
        ScriptedExpr::Add(a, b) => scripted_arith(ArithKind::Add, a, b, args, acc),
        ScriptedExpr::Sub(a, b) => scripted_arith(ArithKind::Sub, a, b, args, acc),
        ScriptedExpr::Mul(a, b) => scripted_arith(ArithKind::Mul, a, b, args, acc),
        ScriptedExpr::Div(a, b) => {
            let x = eval_scripted(a, args, acc);
            let y = eval_scripted(b, args, acc);
            if !numeric(&x) || !numeric(&y) {
                return ValueCell::null();
            }
            if y.is_int() && !y.is_real() {
                if y.as_int() == 0 {
                    return ValueCell::null();
                }
                if x.is_int() && !x.is_real() {
                    return ValueCell::int(x.as_int().wrapping_div(y.as_int()));
                }
            }
            let d = y.numeric_as_real();
            if d == 0.0 {
                return ValueCell::null();
            }
            ValueCell::real(x.numeric_as_real() / d)
        }
        ScriptedExpr::Neg(a) => {
            let x = eval_scripted(a, args, acc);
            if !numeric(&x) {
                return ValueCell::null();
            }
            arith_with_overflow(ArithKind::Sub, &ValueCell::int(0), &x)
        }
        ScriptedExpr::Abs(a) => {
            let x = eval_scripted(a, args, acc);
            if !numeric(&x) {
                return ValueCell::null();
            }
            if x.is_real() {
                ValueCell::real(x.as_real().abs())
            } else if x.as_int() < 0 {
                arith_with_overflow(ArithKind::Sub, &ValueCell::int(0), &x)
            } else {
                x
            }
        }
        ScriptedExpr::Lt(a, b) => scripted_cmp(a, b, args, acc, |o| o == std::cmp::Ordering::Less),
        ScriptedExpr::Le(a, b) => {
            scripted_cmp(a, b, args, acc, |o| o != std::cmp::Ordering::Greater)
        }
        ScriptedExpr::Eq(a, b) => scripted_cmp(a, b, args, acc, |o| o == std::cmp::Ordering::Equal),
        ScriptedExpr::IfThenElse(c, t, e) => {
            if truthy(&eval_scripted(c, args, acc)) {
                eval_scripted(t, args, acc)
            } else {
                eval_scripted(e, args, acc)
            }
        }
        ScriptedExpr::ToReal(a) => {
            let x = eval_scripted(a, args, acc);
            if x.is_null() {
                ValueCell::null()
            } else if x.is_real() {
                ValueCell::real(x.as_real())
            } else if x.is_int() {
                ValueCell::real(x.as_int() as f64)
            } else {
                ValueCell::null()
            }
        }
    }
}

fn numeric(cell: &ValueCell) -> bool {
    cell.is_int() || cell.is_real()
}

fn scripted_arith(
    kind: ArithKind,
    a: &ScriptedExpr,
    b: &ScriptedExpr,
    args: &[ValueCell],
    acc: Option<&ValueCell>,
) -> ValueCell {
    let x = eval_scripted(a, args, acc);
    let y = eval_scripted(b, args, acc);
    if !numeric(&x) || !numeric(&y) {
        return ValueCell::null();
    }
    arith_with_overflow(kind, &x, &y)
}

fn scripted_cmp(
    a: &ScriptedExpr,
    b: &ScriptedExpr,
    args: &[ValueCell],
    acc: Option<&ValueCell>,
    pred: impl Fn(std::cmp::Ordering) -> bool,
) -> ValueCell {
    let x = eval_scripted(a, args, acc);
    let y = eval_scripted(b, args, acc);
    match cmp_cells(&x, &y) {
        None => ValueCell::null(),
        Some(o) => ValueCell::int(pred(o) as i64),
    }
}

pub type NativeFn = Rc<dyn Fn(&Connection, &[ValueCell]) -> Result<ValueCell, HostError>>;
pub type NativeStepFn =
    Rc<dyn Fn(&Connection, &ValueCell, &[ValueCell]) -> Result<ValueCell, HostError>>;
pub type NativeFinalFn = Rc<dyn Fn(&Connection, &ValueCell, u64) -> Result<ValueCell, HostError>>;

/// A scalar implementation: opaque native code or an inlinable script.
#[derive(Clone)]
pub enum FunctionImpl {
    Scripted(Rc<ScriptedExpr>),
    Native(NativeFn),
}

#[derive(Clone)]
pub enum AggStepImpl {
    Scripted(Rc<ScriptedExpr>),
    Native(NativeStepFn),
}

#[derive(Clone)]
pub enum AggFinalImpl {
    Scripted(Rc<ScriptedExpr>),
    Native(NativeFinalFn),
}

pub struct HostFunction {
    pub name: String,
    pub n_args: usize,
    pub imp: FunctionImpl,
    /// Built-ins live engine-side and do not count as boundary callbacks.
    pub builtin: bool,
}

impl HostFunction {
    pub fn is_scripted(&self) -> bool {
        matches!(self.imp, FunctionImpl::Scripted(_))
    }
}

pub struct HostAggregate {
    pub name: String,
    pub n_args: usize,
    pub step: AggStepImpl,
    pub finalize: AggFinalImpl,
    /// Fresh accumulator for each query execution.
    pub init: ValueCell,
    pub builtin: bool,
}

impl HostAggregate {
    pub fn is_scripted(&self) -> bool {
        matches!(self.step, AggStepImpl::Scripted(_))
    }
}

#[derive(Default)]
pub(crate) struct Registry {
    functions: HashMap<(String, usize), Rc<HostFunction>>,
    aggregates: HashMap<(String, usize), Rc<HostAggregate>>,
}

impl Registry {
    fn key(name: &str, n_args: usize) -> (String, usize) {
        (name.to_ascii_lowercase(), n_args)
    }

    pub(crate) fn function(&self, name: &str, n_args: usize) -> Option<Rc<HostFunction>> {
        self.functions.get(&Self::key(name, n_args)).cloned()
    }

    pub(crate) fn aggregate(&self, name: &str, n_args: usize) -> Option<Rc<HostAggregate>> {
        self.aggregates.get(&Self::key(name, n_args)).cloned()
    }
}

impl FunctionResolver for Registry {
    fn resolve(&self, name: &str, n_args: usize) -> Option<CallableKind> {
        let key = Self::key(name, n_args);
        if self.functions.contains_key(&key) {
            Some(CallableKind::Scalar)
        } else if self.aggregates.contains_key(&key) {
            Some(CallableKind::Aggregate)
        } else {
            None
        }
    }
}

pub(crate) struct ConnInner {
    pub(crate) db: SharedDb,
    pub(crate) registry: RefCell<Registry>,
    pub(crate) counters: RefCell<CrossingCounters>,
    pub(crate) metrics: RefCell<RunMetrics>,
    pub(crate) jit: RefCell<JitState>,
    pub(crate) mode: Cell<ExecMode>,
    pub(crate) record_size_limit: Cell<u64>,
    next_program_id: Cell<u64>,
}

/// A single-threaded connection to one database. Cheap to clone; clones share
/// the database, registry, counters, and trace state.
#[derive(Clone)]
pub struct Connection {
    pub(crate) inner: Rc<ConnInner>,
}

impl Connection {
    fn from_db(db: Database) -> Connection {
        let conn = Connection {
            inner: Rc::new(ConnInner {
                db: db.shared(),
                registry: RefCell::new(Registry::default()),
                counters: RefCell::new(CrossingCounters::default()),
                metrics: RefCell::new(RunMetrics::default()),
                jit: RefCell::new(JitState::new()),
                mode: Cell::new(ExecMode::Full),
                record_size_limit: Cell::new(DEFAULT_RECORD_SIZE_LIMIT),
                next_program_id: Cell::new(1),
            }),
        };
        register_builtins(&conn);
        // opening a connection is itself a host<->engine transfer
        conn.tick_crossings(1, 0);
        conn
    }

    /// Open a database file (missing files start empty, bound to the path).
    pub fn open(path: impl AsRef<Path>) -> Result<Connection, EngineError> {
        Ok(Connection::from_db(Database::open(path)?))
    }

    pub fn in_memory() -> Connection {
        Connection::from_db(Database::in_memory())
    }

    pub fn with_database(db: Database) -> Connection {
        Connection::from_db(db)
    }

    pub fn db(&self) -> Ref<'_, Database> {
        self.inner.db.borrow()
    }

    pub fn db_mut(&self) -> RefMut<'_, Database> {
        self.inner.db.borrow_mut()
    }

    pub(crate) fn shared_db(&self) -> &SharedDb {
        &self.inner.db
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EngineError> {
        Ok(self.db().save(path)?)
    }

    pub fn mode(&self) -> ExecMode {
        self.inner.mode.get()
    }

    pub fn set_mode(&self, mode: ExecMode) {
        self.inner.mode.set(mode);
    }

    pub fn threshold(&self) -> u32 {
        self.inner.jit.borrow().threshold
    }

    pub fn set_threshold(&self, threshold: u32) {
        self.inner.jit.borrow_mut().threshold = threshold.max(1);
    }

    pub fn set_record_size_limit(&self, bytes: u64) {
        self.inner.record_size_limit.set(bytes);
    }

    pub fn counters(&self) -> CrossingCounters {
        self.inner.counters.borrow().clone()
    }

    pub fn reset_counters(&self) {
        *self.inner.counters.borrow_mut() = CrossingCounters::default();
    }

    pub fn metrics(&self) -> RunMetrics {
        self.inner.metrics.borrow().clone()
    }

    pub fn reset_metrics(&self) {
        *self.inner.metrics.borrow_mut() = RunMetrics::default();
    }

    /// Summaries of every trace recorded on this connection.
    pub fn trace_summaries(&self) -> Vec<TraceSummary> {
        self.inner.jit.borrow().summaries()
    }

    /// How many traces guard-failure retirement has invalidated.
    pub fn trace_invalidations(&self) -> u64 {
        self.inner.jit.borrow().invalidations
    }

    pub(crate) fn tick_crossings(&self, crossings: u64, values: u64) {
        let mut c = self.inner.counters.borrow_mut();
        c.crossings += crossings;
        c.values_converted += values;
    }

    /// One host-callback round trip carrying `values_out` cells to the host
    /// and `values_in` back.
    pub(crate) fn tick_host_callback(&self, values_out: u64, values_in: u64) {
        self.tick_crossings(1, values_out + values_in);
    }

    pub(crate) fn lookup_function(&self, name: &str, n_args: usize) -> Option<Rc<HostFunction>> {
        self.inner.registry.borrow().function(name, n_args)
    }

    pub(crate) fn lookup_aggregate(&self, name: &str, n_args: usize) -> Option<Rc<HostAggregate>> {
        self.inner.registry.borrow().aggregate(name, n_args)
    }

    fn prepare_internal(&self, sql: &str) -> Result<Statement, EngineError> {
        let ast = parser::parse(sql)?;
        let program_id = self.inner.next_program_id.get();
        self.inner.next_program_id.set(program_id + 1);
        match &ast {
            parser::Ast::CreateTable { name, columns } => {
                let schema: Vec<ColumnSchema> = columns
                    .iter()
                    .map(|(n, a)| ColumnSchema::new(n.clone(), *a))
                    .collect();
                Ok(Statement::new_ddl(
                    self.clone(),
                    program_id,
                    DdlAction::CreateTable {
                        name: name.clone(),
                        schema,
                    },
                    sql,
                ))
            }
            _ => {
                let program = {
                    let db = self.db();
                    let registry = self.inner.registry.borrow();
                    codegen::codegen(&ast, &db, &*registry, sql)?
                };
                Ok(Statement::new(self.clone(), program_id, Rc::new(program)))
            }
        }
    }

    /// Compile a statement. Counts as one boundary crossing (the statement
    /// transfer); parameters bound later via [`Statement::bind`] count as
    /// bind-carrying calls of their own.
    pub fn prepare(&self, sql: &str) -> Result<Statement, EngineError> {
        self.tick_crossings(1, 0);
        self.prepare_internal(sql)
    }

    /// Compile and bind in one transfer; the canonical way for a host program
    /// to start a query. Parameters ride along with the single crossing.
    pub fn execute(&self, sql: &str, params: &[ValueCell]) -> Result<Statement, EngineError> {
        self.tick_crossings(1, params.len() as u64);
        let mut stmt = self.prepare_internal(sql)?;
        for (i, v) in params.iter().enumerate() {
            stmt.bind_internal(i + 1, v.clone())?;
        }
        Ok(stmt)
    }

    /// One-shot execution to completion for statements that produce no rows
    /// (DDL and INSERT). A single crossing: the call returns synchronously.
    pub fn run(&self, sql: &str, params: &[ValueCell]) -> Result<(), EngineError> {
        self.tick_crossings(1, params.len() as u64);
        let mut stmt = self.prepare_internal(sql)?;
        for (i, v) in params.iter().enumerate() {
            stmt.bind_internal(i + 1, v.clone())?;
        }
        loop {
            match stmt.step_inner() {
                StepStatus::Row => continue,
                StepStatus::Done => return Ok(()),
                StepStatus::Error(kind, m) => return Err(EngineError::Exec(kind, m)),
            }
        }
    }

    /// Register a scalar function. Scripted implementations can be inlined
    /// into traces; native ones stay opaque.
    pub fn create_function(
        &self,
        name: &str,
        n_args: usize,
        imp: FunctionImpl,
    ) -> Result<(), EngineError> {
        self.tick_crossings(1, 0);
        self.register_function(name, n_args, imp, false)
    }

    pub fn create_aggregate(
        &self,
        name: &str,
        n_args: usize,
        step: AggStepImpl,
        finalize: AggFinalImpl,
        init: ValueCell,
    ) -> Result<(), EngineError> {
        self.tick_crossings(1, 0);
        self.register_aggregate(name, n_args, step, finalize, init, false)
    }

    fn register_function(
        &self,
        name: &str,
        n_args: usize,
        imp: FunctionImpl,
        builtin: bool,
    ) -> Result<(), EngineError> {
        if let FunctionImpl::Scripted(expr) = &imp {
            expr.validate(n_args, false).map_err(EngineError::Usage)?;
        }
        let key = Registry::key(name, n_args);
        let mut reg = self.inner.registry.borrow_mut();
        if reg.functions.contains_key(&key) || reg.aggregates.contains_key(&key) {
            return Err(EngineError::Usage(format!(
                "function '{name}'/{n_args} is already registered"
            )));
        }
        reg.functions.insert(
            key,
            Rc::new(HostFunction {
                name: name.to_string(),
                n_args,
                imp,
                builtin,
            }),
        );
        Ok(())
    }

    fn register_aggregate(
        &self,
        name: &str,
        n_args: usize,
        step: AggStepImpl,
        finalize: AggFinalImpl,
        init: ValueCell,
        builtin: bool,
    ) -> Result<(), EngineError> {
        if let AggStepImpl::Scripted(expr) = &step {
            expr.validate(n_args, true).map_err(EngineError::Usage)?;
        }
        if let AggFinalImpl::Scripted(expr) = &finalize {
            expr.validate(0, true).map_err(EngineError::Usage)?;
        }
        let key = Registry::key(name, n_args);
        let mut reg = self.inner.registry.borrow_mut();
        if reg.functions.contains_key(&key) || reg.aggregates.contains_key(&key) {
            return Err(EngineError::Usage(format!(
                "aggregate '{name}'/{n_args} is already registered"
            )));
        }
        reg.aggregates.insert(
            key,
            Rc::new(HostAggregate {
                name: name.to_string(),
                n_args,
                step,
                finalize,
                init,
                builtin,
            }),
        );
        Ok(())
    }

    /// Close the connection. Shared state is dropped with the last clone.
    pub fn close(self) {}

    /// Render the compiled form of a statement without executing it.
    pub fn explain(&self, sql: &str) -> Result<String, EngineError> {
        let stmt = self.prepare_internal(sql)?;
        Ok(compiler::explain(stmt.program()))
    }
}

/// sum, avg, and count ship with the engine. sum and count are scripted (so
/// they inline into traces); avg keeps a native finalizer because the
/// scripted vocabulary has no row-count leaf.
fn register_builtins(conn: &Connection) {
    use ScriptedExpr::*;
    // not-null test: eq(x, x) is NULL for NULL and true otherwise
    let not_null = |e: ScriptedExpr| Eq(Box::new(e.clone()), Box::new(e));
    // sum: skip NULLs, overflow switches to real
    let sum_step = IfThenElse(
        Box::new(not_null(Arg(0))),
        Box::new(Add(Box::new(Acc), Box::new(Arg(0)))),
        Box::new(Acc),
    );
    conn.register_aggregate(
        "sum",
        1,
        AggStepImpl::Scripted(Rc::new(sum_step.clone())),
        AggFinalImpl::Scripted(Rc::new(Acc)),
        ValueCell::int(0),
        true,
    )
    .expect("builtin sum");

    // count(col): rows where the argument is not NULL
    let count_step = IfThenElse(
        Box::new(not_null(Arg(0))),
        Box::new(Add(Box::new(Acc), Box::new(Const(ValueCell::int(1))))),
        Box::new(Acc),
    );
    conn.register_aggregate(
        "count",
        1,
        AggStepImpl::Scripted(Rc::new(count_step)),
        AggFinalImpl::Scripted(Rc::new(Acc)),
        ValueCell::int(0),
        true,
    )
    .expect("builtin count/1");

    // count(*): every row
    conn.register_aggregate(
        "count",
        0,
        AggStepImpl::Scripted(Rc::new(Add(
            Box::new(Acc),
            Box::new(Const(ValueCell::int(1))),
        ))),
        AggFinalImpl::Scripted(Rc::new(Acc)),
        ValueCell::int(0),
        true,
    )
    .expect("builtin count/0");

    // avg needs a (sum, count) pair so NULL rows stay out of the
    // denominator; the scripted vocabulary has no pair type, so it keeps a
    // native implementation over an internal record accumulator
    let avg_step: NativeStepFn = Rc::new(|_conn, acc, args| {
        let arg = &args[0];
        if arg.is_null() {
            return Ok(acc.clone());
        }
        let (sum, count) = match acc.record_cells() {
            Some(cells) if cells.len() == 2 => (cells[0].numeric_as_real(), cells[1].as_int()),
            _ => (0.0, 0),
        };
        Ok(ValueCell::record(vec![
            ValueCell::real(sum + arg.numeric_as_real()),
            ValueCell::int(count + 1),
        ]))
    });
    let avg_final: NativeFinalFn = Rc::new(|_conn, acc, _steps| match acc.record_cells() {
        Some(cells) if cells.len() == 2 && cells[1].as_int() > 0 => Ok(ValueCell::real(
            cells[0].as_real() / cells[1].as_int() as f64,
        )),
        _ => Ok(ValueCell::null()),
    });
    conn.register_aggregate(
        "avg",
        1,
        AggStepImpl::Native(avg_step),
        AggFinalImpl::Native(avg_final),
        ValueCell::record(vec![ValueCell::real(0.0), ValueCell::int(0)]),
        true,
    )
    .expect("builtin avg");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scripted_abs_examples() {
        let abs = ScriptedExpr::parse("(if (lt (arg 0) (const 0)) (neg (arg 0)) (arg 0))").unwrap();
        assert_eq!(
            eval_scripted(&abs, &[ValueCell::int(-7)], None),
            ValueCell::int(7)
        );
        assert_eq!(
            eval_scripted(&abs, &[ValueCell::int(3)], None),
            ValueCell::int(3)
        );
    }

    #[test]
    fn scripted_add_with_acc() {
        let e = ScriptedExpr::parse("(add acc (arg 0))").unwrap();
        assert_eq!(
            eval_scripted(&e, &[ValueCell::int(2)], Some(&ValueCell::int(1))),
            ValueCell::int(3)
        );
    }

    #[test]
    fn division_by_zero_is_null() {
        let e = ScriptedExpr::parse("(div (const 1) (const 0))").unwrap();
        assert_eq!(eval_scripted(&e, &[], None), ValueCell::null());
    }

    #[test]
    fn null_propagates_through_arithmetic() {
        let e = ScriptedExpr::parse("(add (arg 0) (const 1))").unwrap();
        assert_eq!(
            eval_scripted(&e, &[ValueCell::null()], None),
            ValueCell::null()
        );
    }

    #[test]
    fn arg_out_of_range_rejected_at_validation() {
        let e = ScriptedExpr::parse("(arg 2)").unwrap();
        assert!(e.validate(2, false).is_err());
        assert!(e.validate(3, false).is_ok());
        assert!(ScriptedExpr::Acc.validate(0, false).is_err());
    }

    #[test]
    fn parse_errors() {
        assert!(ScriptedExpr::parse("(bogus 1)").is_err());
        assert!(ScriptedExpr::parse("(add (const 1))").is_err());
        assert!(ScriptedExpr::parse("(add (const 1) (const 2)) junk").is_err());
    }

    #[test]
    fn not_null_trick() {
        // eq(x, x) is the is-not-null test used by the builtins
        let e = ScriptedExpr::parse("(eq (arg 0) (arg 0))").unwrap();
        assert_eq!(
            eval_scripted(&e, &[ValueCell::null()], None),
            ValueCell::null()
        );
        assert_eq!(
            eval_scripted(&e, &[ValueCell::int(5)], None),
            ValueCell::int(1)
        );
    }

    #[test]
    fn duplicate_registration_rejected() {
        let conn = Connection::in_memory();
        let abs = Rc::new(ScriptedExpr::parse("(abs (arg 0))").unwrap());
        conn.create_function("myabs", 1, FunctionImpl::Scripted(abs.clone()))
            .unwrap();
        let err = conn
            .create_function("MYABS", 1, FunctionImpl::Scripted(abs))
            .unwrap_err();
        assert!(matches!(err, EngineError::Usage(_)));
        // builtins also collide
        let err = conn
            .create_aggregate(
                "sum",
                1,
                AggStepImpl::Scripted(Rc::new(ScriptedExpr::Acc)),
                AggFinalImpl::Scripted(Rc::new(ScriptedExpr::Acc)),
                ValueCell::int(0),
            )
            .unwrap_err();
        assert!(matches!(err, EngineError::Usage(_)));
    }
}
