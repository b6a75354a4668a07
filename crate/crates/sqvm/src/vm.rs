//! The opcode dispatcher: a resumable register-machine interpreter with
//! per-loop hot counters.
//!
//! `step` runs instructions until a `ResultRow` suspends the statement, a
//! `Halt` finishes it, or an error exit fires. Every backward jump ticks the
//! hot-loop table, keyed by the jumping instruction's pc (self-jumps count);
//! when a loop's counter crosses the threshold the next arrival at that pc
//! starts recording, and a completed recording is optimized and attached so
//! later arrivals execute the trace instead of dispatching opcodes.
//!
//! SQLite's error-exit `goto` labels are restructured as a function
//! ([`Statement::error_exit`]) that closes resources and finishes the
//! statement before the error status is returned.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::compiler::{Instruction, Opcode, Program, P4};
use crate::hostapi::{
    eval_scripted, AggFinalImpl, AggStepImpl, Connection, EngineError, FunctionImpl,
};
use crate::storage::{ColumnSchema, Cursor, StorageError};
use crate::trace::{self, CallTarget, Recorder, Trace, TraceState};
use crate::value::{arith_with_overflow, compare_cells, ArithKind, ValueCell};

/// Back-jump count after which a loop is hot.
pub const DEFAULT_HOT_THRESHOLD: u32 = 16;

/// Execution/ablation mode for a connection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    /// Interpreter only; no traces are recorded or executed.
    Interp,
    /// All trace optimizations.
    Full,
    /// Scripted host calls are recorded as opaque calls.
    NoInline,
    /// Flags-cache elimination disabled.
    NoFlags,
}

impl ExecMode {
    pub fn name(self) -> &'static str {
        match self {
            ExecMode::Interp => "interp",
            ExecMode::Full => "full",
            ExecMode::NoInline => "no-inline",
            ExecMode::NoFlags => "no-flags",
        }
    }

    pub fn parse(s: &str) -> Option<ExecMode> {
        match s {
            "interp" => Some(ExecMode::Interp),
            "full" => Some(ExecMode::Full),
            "no-inline" => Some(ExecMode::NoInline),
            "no-flags" => Some(ExecMode::NoFlags),
            _ => None,
        }
    }

    pub const ALL: [ExecMode; 4] = [
        ExecMode::Interp,
        ExecMode::Full,
        ExecMode::NoInline,
        ExecMode::NoFlags,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    NoMem,
    TooBig,
    AbortDueToError,
    Usage,
    Constraint,
}

/// Result of one `step` call.
#[derive(Clone, Debug, PartialEq)]
pub enum StepStatus {
    /// A result row is available via `result_row`.
    Row,
    Done,
    Error(ErrorKind, String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StmtState {
    Ready,
    Running,
    Suspended,
    Finished,
}

#[derive(Clone, Debug)]
pub enum DdlAction {
    CreateTable {
        name: String,
        schema: Vec<ColumnSchema>,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct AggContext {
    pub acc: ValueCell,
    pub steps: u64,
}

/// Per-connection hot-loop counters, blacklist, and attached traces.
pub(crate) struct JitState {
    pub threshold: u32,
    counters: HashMap<(u64, usize), u32>,
    armed: HashSet<(u64, usize)>,
    blacklist: HashSet<(u64, usize)>,
    pub(crate) traces: HashMap<(u64, usize), Trace>,
    /// The as-recorded form of each attached trace, kept for inspection and
    /// the recorded-vs-optimized replay oracle.
    pub(crate) recorded: HashMap<(u64, usize), Trace>,
    /// Traces retired by guard-failure count since the connection opened.
    pub(crate) invalidations: u64,
}

impl JitState {
    pub fn new() -> JitState {
        JitState {
            threshold: DEFAULT_HOT_THRESHOLD,
            counters: HashMap::new(),
            armed: HashSet::new(),
            blacklist: HashSet::new(),
            traces: HashMap::new(),
            recorded: HashMap::new(),
            invalidations: 0,
        }
    }

    /// Count one backward jump at `key`; arms recording once the threshold is
    /// reached and the loop is neither blacklisted nor already traced.
    fn tick(&mut self, key: (u64, usize)) {
        if self.blacklist.contains(&key) {
            return;
        }
        if let Some(t) = self.traces.get(&key) {
            if t.state != TraceState::Invalid {
                return;
            }
        }
        let c = self.counters.entry(key).or_insert(0);
        *c += 1;
        if *c >= self.threshold {
            self.armed.insert(key);
        }
    }

    fn take_armed(&mut self, key: (u64, usize)) -> bool {
        self.armed.remove(&key)
    }

    fn blacklist_header(&mut self, key: (u64, usize)) {
        self.blacklist.insert(key);
        self.armed.remove(&key);
    }

    fn attach(&mut self, key: (u64, usize), trace: Trace) {
        self.armed.remove(&key);
        self.traces.insert(key, trace);
    }

    pub(crate) fn reset_counter(&mut self, key: (u64, usize)) {
        self.counters.insert(key, 0);
        self.armed.remove(&key);
    }

    fn has_optimized(&self, key: (u64, usize)) -> bool {
        self.traces
            .get(&key)
            .is_some_and(|t| t.state == TraceState::Optimized)
    }

    pub fn summaries(&self) -> Vec<TraceSummary> {
        let mut out: Vec<TraceSummary> = self
            .traces
            .values()
            .map(|t| TraceSummary {
                program_id: t.program_id,
                header_pc: t.header_pc,
                state: t.state,
                ops_unoptimized: t.ops_unoptimized,
                ops_optimized: t.ops.len(),
                guard_failures: t.guard_fail_counts.values().sum(),
            })
            .collect();
        out.sort_by_key(|s| (s.program_id, s.header_pc));
        out
    }
}

/// Public view of one recorded trace.
#[derive(Clone, Debug)]
pub struct TraceSummary {
    pub program_id: u64,
    pub header_pc: usize,
    pub state: TraceState,
    pub ops_unoptimized: usize,
    pub ops_optimized: usize,
    pub guard_failures: u32,
}

enum Flow {
    Advance,
    Jump(usize),
    Row { first: i32, count: i32 },
    Halt,
    Fail(ErrorKind, String),
}

/// A prepared statement: program, registers, cursors, parameters, and the
/// resumable program counter.
pub struct Statement {
    pub(crate) conn: Connection,
    pub(crate) program: Rc<Program>,
    pub(crate) program_id: u64,
    pub(crate) registers: Vec<ValueCell>,
    pub(crate) cursors: Vec<Option<Cursor>>,
    pub(crate) pc: usize,
    pub(crate) params: Vec<ValueCell>,
    pub(crate) state: StmtState,
    pub(crate) agg_contexts: HashMap<i32, AggContext>,
    pub(crate) result_window: Option<(i32, i32)>,
    pub(crate) recording: Option<Recorder>,
    ddl: Option<DdlAction>,
    pub(crate) fail_next_alloc: bool,
}

impl Statement {
    pub(crate) fn new(conn: Connection, program_id: u64, program: Rc<Program>) -> Statement {
        let registers = vec![ValueCell::null(); program.n_registers.max(1)];
        let cursors = (0..program.n_cursors).map(|_| None).collect();
        let params = vec![ValueCell::null(); program.param_count];
        Statement {
            conn,
            program,
            program_id,
            registers,
            cursors,
            pc: 0,
            params,
            state: StmtState::Ready,
            agg_contexts: HashMap::new(),
            result_window: None,
            recording: None,
            ddl: None,
            fail_next_alloc: false,
        }
    }

    pub(crate) fn new_ddl(
        conn: Connection,
        program_id: u64,
        action: DdlAction,
        sql: &str,
    ) -> Statement {
        let program = Program::new(
            vec![
                Instruction::new(Opcode::Init, 0, 1, 0),
                Instruction::new(Opcode::Halt, 0, 0, 0),
            ],
            1,
            0,
            0,
            sql.to_string(),
        )
        .expect("ddl shell program");
        let mut stmt = Statement::new(conn, program_id, Rc::new(program));
        stmt.ddl = Some(action);
        stmt
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn state(&self) -> StmtState {
        self.state
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Bind a positional parameter (1-based). Counts as a bind-carrying call.
    pub fn bind(&mut self, index: usize, value: ValueCell) -> Result<(), EngineError> {
        self.conn.tick_crossings(1, 1);
        self.bind_internal(index, value)
    }

    pub(crate) fn bind_internal(
        &mut self,
        index: usize,
        value: ValueCell,
    ) -> Result<(), EngineError> {
        if self.state != StmtState::Ready {
            return Err(EngineError::Usage(
                "bind on a statement that has started".into(),
            ));
        }
        if index == 0 || index > self.params.len() {
            return Err(EngineError::Usage(format!(
                "bind index {index} out of range (statement has {} parameters)",
                self.params.len()
            )));
        }
        self.params[index - 1] = value;
        Ok(())
    }

    /// Execute until a row is available, the statement completes, or an error
    /// exit fires. Each return is one boundary crossing; a row carries its
    /// cells across.
    pub fn step(&mut self) -> StepStatus {
        let status = self.step_inner();
        let row_values = match (&status, self.result_window) {
            (StepStatus::Row, Some((_, count))) => count as u64,
            _ => 0,
        };
        self.conn.tick_crossings(1, row_values);
        status
    }

    /// Cells of the suspending `ResultRow`: registers p1..p1+p2-1.
    pub fn result_row(&self) -> Result<Vec<ValueCell>, EngineError> {
        if self.state != StmtState::Suspended {
            return Err(EngineError::Usage("no row available".into()));
        }
        let (first, count) = self
            .result_window
            .ok_or_else(|| EngineError::Usage("no row available".into()))?;
        Ok((first..first + count)
            .map(|r| self.registers[r as usize].clone())
            .collect())
    }

    /// Render every trace attached to this statement's program.
    pub fn trace_dumps(&self) -> Vec<String> {
        let jit = self.conn.inner.jit.borrow();
        let mut keys: Vec<_> = jit
            .traces
            .iter()
            .filter(|((pid, _), _)| *pid == self.program_id)
            .collect();
        keys.sort_by_key(|((_, pc), _)| *pc);
        keys.iter()
            .map(|(_, t)| trace::dump_trace(t, &self.program))
            .collect()
    }

    fn reg(&self, i: i32) -> &ValueCell {
        &self.registers[i as usize]
    }

    fn set_reg(&mut self, i: i32, v: ValueCell) {
        self.registers[i as usize] = v;
    }

    fn close_cursors(&mut self) {
        for c in &mut self.cursors {
            if let Some(mut cur) = c.take() {
                cur.close();
            }
        }
    }

    /// The restructured error-exit path: closes every cursor, finishes the
    /// statement, and returns the error status.
    pub(crate) fn error_exit(&mut self, kind: ErrorKind, message: String) -> StepStatus {
        self.close_cursors();
        self.recording = None;
        self.state = StmtState::Finished;
        StepStatus::Error(kind, message)
    }

    fn finish_recording(&mut self) {
        let rec = match self.recording.take() {
            Some(r) => r,
            None => return,
        };
        let key = (self.program_id, rec.header_pc);
        let trace = rec.finish(self.program_id);
        let optimized = trace::optimize_trace(&trace, self.conn.mode());
        let mut jit = self.conn.inner.jit.borrow_mut();
        jit.recorded.insert(key, trace);
        jit.attach(key, optimized);
    }

    fn abort_recording(&mut self, blacklist: bool) {
        if let Some(rec) = self.recording.take() {
            if blacklist {
                self.conn
                    .inner
                    .jit
                    .borrow_mut()
                    .blacklist_header((self.program_id, rec.header_pc));
            }
        }
    }

    pub(crate) fn step_inner(&mut self) -> StepStatus {
        match self.state {
            StmtState::Ready | StmtState::Suspended => {
                self.state = StmtState::Running;
                self.result_window = None;
            }
            _ => return StepStatus::Error(ErrorKind::Usage, "step on a finished statement".into()),
        }
        if let Some(ddl) = self.ddl.take() {
            return self.run_ddl(ddl);
        }
        let program = Rc::clone(&self.program);
        let mode = self.conn.mode();
        loop {
            let pc = self.pc;
            if pc >= program.instructions.len() {
                return self.error_exit(ErrorKind::Usage, format!("pc {pc} out of bounds"));
            }

            // a completed loop recording attaches when control returns to the
            // header it started from
            if let Some(rec) = &self.recording {
                if rec.header_pc == pc && !rec.ops.is_empty() {
                    self.finish_recording();
                }
            }

            if mode != ExecMode::Interp && self.recording.is_none() {
                let key = (self.program_id, pc);
                if self.conn.inner.jit.borrow().has_optimized(key) {
                    match trace::execute_trace(self) {
                        trace::TraceOutcome::ContinueLoop => continue,
                        trace::TraceOutcome::SideExit(_) => continue,
                        trace::TraceOutcome::EmittedRow => {
                            self.state = StmtState::Suspended;
                            return StepStatus::Row;
                        }
                        trace::TraceOutcome::Error(kind, m) => return self.error_exit(kind, m),
                    }
                }
                if self.conn.inner.jit.borrow_mut().take_armed(key) {
                    self.recording = Some(Recorder::new(pc));
                }
            }

            let inst = program.instructions[pc].clone();
            self.conn.inner.metrics.borrow_mut().interp_ops += 1;
            let flow = self.exec_instruction(pc, &inst);
            let new_pc = match flow {
                Flow::Advance => pc + 1,
                Flow::Jump(t) => t,
                Flow::Row { first, count } => {
                    self.result_window = Some((first, count));
                    self.pc = pc + 1;
                    self.state = StmtState::Suspended;
                    return StepStatus::Row;
                }
                Flow::Halt => {
                    self.close_cursors();
                    self.recording = None;
                    self.state = StmtState::Finished;
                    return StepStatus::Done;
                }
                Flow::Fail(kind, m) => return self.error_exit(kind, m),
            };
            self.pc = new_pc;
            if new_pc <= pc {
                // a back-jump belonging to a different loop aborts recording
                // and blacklists the outer header
                if let Some(rec) = &self.recording {
                    if rec.header_pc != pc {
                        self.abort_recording(true);
                    }
                }
                self.conn.inner.jit.borrow_mut().tick((self.program_id, pc));
            }
        }
    }

    fn run_ddl(&mut self, ddl: DdlAction) -> StepStatus {
        self.state = StmtState::Finished;
        match ddl {
            DdlAction::CreateTable { name, schema } => {
                match self.conn.db_mut().create_table(&name, schema) {
                    Ok(()) => StepStatus::Done,
                    Err(e) => StepStatus::Error(ErrorKind::Constraint, e.to_string()),
                }
            }
        }
    }

    fn cursor(&self, idx: i32) -> Result<&Cursor, String> {
        self.cursors
            .get(idx as usize)
            .and_then(|c| c.as_ref())
            .ok_or_else(|| format!("cursor {idx} is not open"))
    }

    fn cursor_mut(&mut self, idx: i32) -> Result<&mut Cursor, String> {
        self.cursors
            .get_mut(idx as usize)
            .and_then(|c| c.as_mut())
            .ok_or_else(|| format!("cursor {idx} is not open"))
    }

    fn storage_fail(e: StorageError) -> Flow {
        let kind = match &e {
            StorageError::Locked(_) | StorageError::Schema(_) => ErrorKind::Constraint,
            _ => ErrorKind::Usage,
        };
        Flow::Fail(kind, e.to_string())
    }

    fn exec_instruction(&mut self, pc: usize, inst: &Instruction) -> Flow {
        match inst.opcode {
            Opcode::Init | Opcode::Goto => Flow::Jump(inst.p2 as usize),
            Opcode::Transaction | Opcode::TableLock => Flow::Advance,
            Opcode::Halt => Flow::Halt,
            Opcode::Gosub => {
                self.abort_recording(true);
                self.set_reg(inst.p1, ValueCell::int(pc as i64 + 1));
                Flow::Jump(inst.p2 as usize)
            }
            Opcode::Return => {
                self.abort_recording(true);
                let target = self.reg(inst.p1);
                if !target.is_int() {
                    return Flow::Fail(
                        ErrorKind::Usage,
                        "Return register is not an integer".into(),
                    );
                }
                let t = target.as_int();
                if t < 0 || t as usize >= self.program.instructions.len() {
                    return Flow::Fail(
                        ErrorKind::Usage,
                        format!("Return target {t} out of bounds"),
                    );
                }
                Flow::Jump(t as usize)
            }
            Opcode::OpenRead | Opcode::OpenWrite => {
                self.abort_recording(true);
                let P4::Text(table) = &inst.p4 else {
                    return Flow::Fail(ErrorKind::Usage, "OpenRead/OpenWrite needs a table".into());
                };
                let res = if inst.opcode == Opcode::OpenRead {
                    Cursor::open_read(self.conn.shared_db(), table)
                } else {
                    Cursor::open_write(self.conn.shared_db(), table)
                };
                match res {
                    Ok(cur) => {
                        self.cursors[inst.p1 as usize] = Some(cur);
                        Flow::Advance
                    }
                    Err(e) => Self::storage_fail(e),
                }
            }
            Opcode::Close => {
                self.abort_recording(true);
                if let Some(mut cur) = self.cursors[inst.p1 as usize].take() {
                    cur.close();
                }
                Flow::Advance
            }
            Opcode::Rewind => {
                self.abort_recording(true);
                match self.cursor_mut(inst.p1).map(|c| c.rewind()) {
                    Ok(Ok(empty)) => {
                        if empty {
                            Flow::Jump(inst.p2 as usize)
                        } else {
                            Flow::Advance
                        }
                    }
                    Ok(Err(e)) => Self::storage_fail(e),
                    Err(m) => Flow::Fail(ErrorKind::Usage, m),
                }
            }
            Opcode::Next => {
                let has_more = match self.cursor_mut(inst.p1).map(|c| c.next()) {
                    Ok(Ok(b)) => b,
                    Ok(Err(e)) => return Self::storage_fail(e),
                    Err(m) => return Flow::Fail(ErrorKind::Usage, m),
                };
                if let Some(rec) = self.recording.as_mut() {
                    if has_more {
                        rec.on_cursor_next(pc, inst.p1);
                    } else {
                        // the loop ended mid-recording; nothing to blacklist
                        self.abort_recording(false);
                    }
                }
                if has_more {
                    Flow::Jump(inst.p2 as usize)
                } else {
                    Flow::Advance
                }
            }
            Opcode::Column => {
                let (cell, encoded) = match self.cursor(inst.p1).map(|c| c.column(inst.p2 as usize))
                {
                    Ok(Ok(pair)) => pair,
                    Ok(Err(e)) => return Self::storage_fail(e),
                    Err(m) => return Flow::Fail(ErrorKind::Usage, m),
                };
                self.set_reg(inst.p3, cell);
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_column(pc, inst.p1, inst.p2, inst.p3, encoded);
                }
                Flow::Advance
            }
            Opcode::RealAffinity => {
                let before = self.reg(inst.p1).clone();
                let after = crate::value::apply_real_affinity(&before);
                self.set_reg(inst.p1, after);
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_real_affinity(pc, inst.p1, before.flags());
                }
                Flow::Advance
            }
            Opcode::ResultRow => {
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_emit_row(pc, inst.p1, inst.p2);
                }
                Flow::Row {
                    first: inst.p1,
                    count: inst.p2,
                }
            }
            Opcode::IfPos => {
                let cell = self.reg(inst.p1).clone();
                let is_int = cell.is_int();
                let taken = is_int && cell.as_int() > 0;
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_ifpos(pc, inst.p1, cell.flags(), is_int, taken);
                }
                if taken {
                    Flow::Jump(inst.p2 as usize)
                } else {
                    Flow::Advance
                }
            }
            Opcode::NotNull => {
                let flags = self.reg(inst.p1).flags();
                let taken = flags & crate::value::FLAG_NULL == 0;
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_flag_branch(pc, inst.p1, flags);
                }
                if taken {
                    Flow::Jump(inst.p2 as usize)
                } else {
                    Flow::Advance
                }
            }
            Opcode::IsNull => {
                let flags = self.reg(inst.p1).flags();
                let taken = flags & crate::value::FLAG_NULL != 0;
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_flag_branch(pc, inst.p1, flags);
                }
                if taken {
                    Flow::Jump(inst.p2 as usize)
                } else {
                    Flow::Advance
                }
            }
            Opcode::Integer => {
                let v = match inst.p4 {
                    P4::Int64(big) => big,
                    _ => inst.p1 as i64,
                };
                let cell = ValueCell::int(v);
                self.set_reg(inst.p2, cell.clone());
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_write_const(pc, inst.p2, cell);
                }
                Flow::Advance
            }
            Opcode::Real => {
                let P4::Float64(v) = inst.p4 else {
                    return Flow::Fail(ErrorKind::Usage, "Real needs a float p4".into());
                };
                let cell = ValueCell::real(v);
                self.set_reg(inst.p2, cell.clone());
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_write_const(pc, inst.p2, cell);
                }
                Flow::Advance
            }
            Opcode::String => {
                let P4::Text(s) = &inst.p4 else {
                    return Flow::Fail(ErrorKind::Usage, "String needs a text p4".into());
                };
                let cell = ValueCell::text(s.clone());
                self.set_reg(inst.p2, cell.clone());
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_write_const(pc, inst.p2, cell);
                }
                Flow::Advance
            }
            Opcode::Null => {
                let cell = ValueCell::null();
                self.set_reg(inst.p2, cell.clone());
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_write_const(pc, inst.p2, cell);
                }
                Flow::Advance
            }
            Opcode::Variable => {
                // parameter loads depend on per-execution state, so they are
                // never recorded into a trace
                self.abort_recording(true);
                let idx = inst.p1 as usize;
                if idx == 0 || idx > self.params.len() {
                    return Flow::Fail(ErrorKind::Usage, format!("parameter {idx} out of range"));
                }
                let v = self.params[idx - 1].clone();
                self.set_reg(inst.p2, v);
                Flow::Advance
            }
            Opcode::Add | Opcode::Sub | Opcode::Mul => self.exec_arith(pc, inst),
            Opcode::Eq | Opcode::Ne | Opcode::Lt | Opcode::Le | Opcode::Gt | Opcode::Ge => {
                self.exec_compare(pc, inst)
            }
            Opcode::MakeRecord => self.exec_make_record(pc, inst),
            Opcode::NewRowid => {
                self.abort_recording(true);
                match self.cursor(inst.p1).map(|c| c.peek_next_rowid()) {
                    Ok(Ok(rowid)) => {
                        self.set_reg(inst.p2, ValueCell::int(rowid));
                        Flow::Advance
                    }
                    Ok(Err(e)) => Self::storage_fail(e),
                    Err(m) => Flow::Fail(ErrorKind::Usage, m),
                }
            }
            Opcode::Insert => {
                self.abort_recording(true);
                let cells = match self.reg(inst.p2).record_cells() {
                    Some(c) => c.to_vec(),
                    None => {
                        return Flow::Fail(
                            ErrorKind::Usage,
                            "Insert source register does not hold a record".into(),
                        )
                    }
                };
                match self.cursor_mut(inst.p1).map(|c| c.insert(cells)) {
                    Ok(Ok(_rowid)) => Flow::Advance,
                    Ok(Err(e)) => Self::storage_fail(e),
                    Err(m) => Flow::Fail(ErrorKind::Usage, m),
                }
            }
            Opcode::Function => self.exec_function(pc, inst),
            Opcode::AggStep => self.exec_agg_step(pc, inst),
            Opcode::AggFinal => self.exec_agg_final(pc, inst),
        }
    }

    fn exec_arith(&mut self, pc: usize, inst: &Instruction) -> Flow {
        let a = self.reg(inst.p1).clone();
        let b = self.reg(inst.p2).clone();
        // SQLite operand order: Add/Mul combine p1 and p2; Sub computes
        // r[p2] - r[p1]
        let (kind, lhs, rhs, lhs_reg, rhs_reg) = match inst.opcode {
            Opcode::Add => (ArithKind::Add, a, b, inst.p1, inst.p2),
            Opcode::Sub => (ArithKind::Sub, b, a, inst.p2, inst.p1),
            Opcode::Mul => (ArithKind::Mul, a, b, inst.p1, inst.p2),
            _ => unreachable!(),
        };
        let numeric = |c: &ValueCell| c.is_int() || c.is_real();
        let result = if !numeric(&lhs) || !numeric(&rhs) {
            // NULL (and non-numeric text, which has no stored numeric value)
            // propagates NULL
            ValueCell::null()
        } else {
            arith_with_overflow(kind, &lhs, &rhs)
        };
        if let Some(rec) = self.recording.as_mut() {
            rec.on_arith(pc, kind, lhs_reg, &lhs, rhs_reg, &rhs, inst.p3, &result);
        }
        self.set_reg(inst.p3, result);
        Flow::Advance
    }

    fn exec_compare(&mut self, pc: usize, inst: &Instruction) -> Flow {
        let a = self.reg(inst.p1).clone();
        let b = self.reg(inst.p3).clone();
        let taken = compare_cells(&a, &b).map(|o| match inst.opcode {
            Opcode::Eq => o == std::cmp::Ordering::Equal,
            Opcode::Ne => o != std::cmp::Ordering::Equal,
            Opcode::Lt => o == std::cmp::Ordering::Less,
            Opcode::Le => o != std::cmp::Ordering::Greater,
            Opcode::Gt => o == std::cmp::Ordering::Greater,
            Opcode::Ge => o != std::cmp::Ordering::Less,
            _ => unreachable!(),
        });
        if let Some(rec) = self.recording.as_mut() {
            rec.on_compare(pc, inst.opcode, inst.p1, &a, inst.p3, &b, taken);
        }
        // NULL comparisons never jump
        match taken {
            Some(true) => Flow::Jump(inst.p2 as usize),
            _ => Flow::Advance,
        }
    }

    fn exec_make_record(&mut self, pc: usize, inst: &Instruction) -> Flow {
        let P4::Arity(n) = inst.p4 else {
            return Flow::Fail(ErrorKind::Usage, "MakeRecord needs an arity p4".into());
        };
        if self.fail_next_alloc {
            self.fail_next_alloc = false;
            return Flow::Fail(ErrorKind::NoMem, "record allocation failed".into());
        }
        let cells: Vec<ValueCell> = (inst.p1..inst.p1 + n as i32)
            .map(|r| self.reg(r).clone())
            .collect();
        let size: u64 = cells.iter().map(ValueCell::payload_size).sum();
        if size > self.conn.inner.record_size_limit.get() {
            return Flow::Fail(
                ErrorKind::TooBig,
                format!("record of {size} bytes exceeds the size cap"),
            );
        }
        if let Some(rec) = self.recording.as_mut() {
            let flags: Vec<u16> = cells.iter().map(|c| c.flags()).collect();
            rec.on_make_record(pc, inst.p1, n, &flags, inst.p3);
        }
        self.set_reg(inst.p3, ValueCell::record(cells));
        Flow::Advance
    }

    fn exec_function(&mut self, pc: usize, inst: &Instruction) -> Flow {
        let P4::Func { name, n_args } = &inst.p4 else {
            return Flow::Fail(ErrorKind::Usage, "Function needs a function p4".into());
        };
        let Some(f) = self.conn.lookup_function(name, *n_args) else {
            return Flow::Fail(
                ErrorKind::Usage,
                format!("no such function '{name}'/{n_args}"),
            );
        };
        let args: Vec<ValueCell> = (inst.p2..inst.p2 + *n_args as i32)
            .map(|r| self.reg(r).clone())
            .collect();
        if !f.builtin {
            self.conn.tick_host_callback(*n_args as u64, 1);
        }
        let result = match &f.imp {
            FunctionImpl::Scripted(expr) => Ok(eval_scripted(expr, &args, None)),
            FunctionImpl::Native(nf) => nf(&self.conn, &args),
        };
        match result {
            Ok(v) => {
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_call(
                        pc,
                        Opcode::Function,
                        name,
                        *n_args,
                        inst.p2,
                        CallTarget::Reg(inst.p3),
                        f.is_scripted(),
                        !f.builtin,
                        self.conn.mode(),
                        inst,
                    );
                }
                self.set_reg(inst.p3, v);
                Flow::Advance
            }
            Err(he) => Flow::Fail(ErrorKind::AbortDueToError, he.message),
        }
    }

    fn exec_agg_step(&mut self, pc: usize, inst: &Instruction) -> Flow {
        let P4::Func { name, n_args } = &inst.p4 else {
            return Flow::Fail(ErrorKind::Usage, "AggStep needs a function p4".into());
        };
        let Some(agg) = self.conn.lookup_aggregate(name, *n_args) else {
            return Flow::Fail(
                ErrorKind::Usage,
                format!("no such aggregate '{name}'/{n_args}"),
            );
        };
        let args: Vec<ValueCell> = (inst.p2..inst.p2 + *n_args as i32)
            .map(|r| self.reg(r).clone())
            .collect();
        let acc = self
            .agg_contexts
            .get(&inst.p3)
            .map(|c| c.acc.clone())
            .unwrap_or_else(|| agg.init.clone());
        if !agg.builtin {
            self.conn.tick_host_callback(*n_args as u64 + 1, 1);
        }
        let result = match &agg.step {
            AggStepImpl::Scripted(expr) => Ok(eval_scripted(expr, &args, Some(&acc))),
            AggStepImpl::Native(f) => f(&self.conn, &acc, &args),
        };
        match result {
            Ok(new_acc) => {
                if let Some(rec) = self.recording.as_mut() {
                    rec.on_call(
                        pc,
                        Opcode::AggStep,
                        name,
                        *n_args,
                        inst.p2,
                        CallTarget::AggCtx(inst.p3),
                        agg.is_scripted(),
                        !agg.builtin,
                        self.conn.mode(),
                        inst,
                    );
                }
                let ctx = self.agg_contexts.entry(inst.p3).or_insert(AggContext {
                    acc: ValueCell::null(),
                    steps: 0,
                });
                ctx.acc = new_acc;
                ctx.steps += 1;
                Flow::Advance
            }
            Err(he) => Flow::Fail(ErrorKind::AbortDueToError, he.message),
        }
    }

    fn exec_agg_final(&mut self, pc: usize, inst: &Instruction) -> Flow {
        let _ = pc;
        self.abort_recording(true);
        let P4::Func { name, n_args } = &inst.p4 else {
            return Flow::Fail(ErrorKind::Usage, "AggFinal needs a function p4".into());
        };
        let Some(agg) = self.conn.lookup_aggregate(name, *n_args) else {
            return Flow::Fail(
                ErrorKind::Usage,
                format!("no such aggregate '{name}'/{n_args}"),
            );
        };
        let ctx = self.agg_contexts.remove(&inst.p1).unwrap_or(AggContext {
            acc: agg.init.clone(),
            steps: 0,
        });
        if !agg.builtin {
            self.conn.tick_host_callback(1, 1);
        }
        let result = match &agg.finalize {
            AggFinalImpl::Scripted(expr) => Ok(eval_scripted(expr, &[], Some(&ctx.acc))),
            AggFinalImpl::Native(f) => f(&self.conn, &ctx.acc, ctx.steps),
        };
        match result {
            Ok(v) => {
                self.set_reg(inst.p3, v);
                Flow::Advance
            }
            Err(he) => Flow::Fail(ErrorKind::AbortDueToError, he.message),
        }
    }
}

impl Drop for Statement {
    fn drop(&mut self) {
        self.close_cursors();
    }
}
