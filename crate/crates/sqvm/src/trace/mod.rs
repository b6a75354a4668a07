//! Trace IR: recording of hot-loop iterations, optimization passes, and
//! guarded execution with side exits back to the interpreter.
//!
//! A trace is a linear recording of one loop iteration. Every branch the
//! interpreter took while recording is pinned by a guard; executing the trace
//! replays the straight-line ops and falls back to the interpreter at the
//! recorded pc whenever a guard fails. The optimizer's main job is the flags
//! cache: a guarded `Column` result proves the destination register's type,
//! so later flag reads, flag guards, and `RealAffinity` checks on that
//! register can be deleted.

pub mod execute;
pub mod optimize;
pub mod record;

use std::collections::HashMap;
use std::rc::Rc;

use crate::compiler::{Opcode, Program};
use crate::value::ValueCell;

pub use execute::{execute_trace, TraceOutcome};
pub use optimize::optimize_trace;
pub use record::Recorder;

/// Index of the trace op that produced a runtime value.
pub type ValId = usize;

/// Arithmetic and comparison flavors a trace `Arith` op can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceArith {
    Add,
    Sub,
    Mul,
    CmpEq,
    CmpNe,
    CmpLt,
    CmpLe,
    CmpGt,
    CmpGe,
}

impl TraceArith {
    fn name(self) -> &'static str {
        match self {
            TraceArith::Add => "add",
            TraceArith::Sub => "sub",
            TraceArith::Mul => "mul",
            TraceArith::CmpEq => "cmp_eq",
            TraceArith::CmpNe => "cmp_ne",
            TraceArith::CmpLt => "cmp_lt",
            TraceArith::CmpLe => "cmp_le",
            TraceArith::CmpGt => "cmp_gt",
            TraceArith::CmpGe => "cmp_ge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceOperand {
    Val(ValId),
    Imm(i64),
}

/// Where a recorded call writes its result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CallTarget {
    Reg(i32),
    /// Aggregate context slot keyed by the context register index.
    AggCtx(i32),
}

#[derive(Clone, Debug, PartialEq)]
pub enum GuardKind {
    /// Runtime value must equal the recorded 32-bit constant.
    Value {
        operand: ValId,
        expected: u32,
    },
    True {
        operand: ValId,
    },
    False {
        operand: ValId,
    },
    /// The producing integer arithmetic op must not have overflowed.
    NoOverflow {
        operand: ValId,
    },
    /// The register's live flags must equal the recorded bitmask.
    Flags {
        reg: i32,
        expected: u16,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Guard {
    pub kind: GuardKind,
    /// Interpreter pc to resume at when the guard fails.
    pub exit_pc: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TraceOpKind {
    /// Read a column through a cursor into a register; the produced value is
    /// the encoded `(rc, flags)` column result.
    ReadColumn {
        cursor: i32,
        col: i32,
        dest: i32,
    },
    /// Advance a cursor; produces 0 while rows remain, 1 at the end.
    CursorNext {
        cursor: i32,
    },
    /// The modeled dynamic load of a register's flags bitmask.
    ReadFlags {
        reg: i32,
    },
    ReadInt {
        reg: i32,
    },
    ReadReal {
        reg: i32,
    },
    ReadStr {
        reg: i32,
    },
    /// Store a constant cell into a register.
    WriteCell {
        reg: i32,
        value: ValueCell,
    },
    Arith {
        op: TraceArith,
        lhs: TraceOperand,
        rhs: TraceOperand,
        /// Register written for add/sub/mul; comparisons produce a value only.
        dest: Option<i32>,
        /// Float evaluation (any real operand, or record-time overflow).
        as_float: bool,
    },
    /// The dynamic check of the RealAffinity opcode.
    AffinityReal {
        reg: i32,
    },
    /// MakeRecord with its register loop unrolled at record time.
    PackRecord {
        first: i32,
        arity: usize,
        dest: i32,
    },
    /// Opaque host call: the optimizer knows only the mutated registers.
    CallOpaque {
        name: String,
        n_args: usize,
        first_arg: i32,
        target: CallTarget,
        mutated: Vec<i32>,
        /// Host-registered (counts as a boundary callback when executed).
        host: bool,
    },
    /// Inlined scripted call evaluated inside the trace.
    InlineEval {
        name: String,
        n_args: usize,
        first_arg: i32,
        target: CallTarget,
        host: bool,
    },
    EmitRow {
        first: i32,
        count: i32,
    },
    Guard(Guard),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceOp {
    pub kind: TraceOpKind,
    /// Source instruction this op was recorded from; side exits resume here
    /// unless the guard carries its own exit pc.
    pub origin_pc: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceState {
    Recorded,
    Optimized,
    Invalid,
}

/// Guard-failure retirement: a trace is invalidated after this many failures
/// of the same guard, and the loop's hot counter starts over.
pub const GUARD_FAIL_LIMIT: u32 = 8;

#[derive(Clone, Debug)]
pub struct Trace {
    pub ops: Rc<Vec<TraceOp>>,
    pub header_pc: usize,
    pub program_id: u64,
    pub state: TraceState,
    /// Op count as recorded, before optimization.
    pub ops_unoptimized: usize,
    /// Source pcs covered by the recording, in order; kept so the dump can
    /// show opcodes whose ops were all optimized away.
    pub covered_pcs: Vec<usize>,
    /// Per-op-index guard failure counts.
    pub guard_fail_counts: HashMap<usize, u32>,
}

impl Trace {
    /// Count a guard failure; past [`GUARD_FAIL_LIMIT`] failures of the same
    /// guard the trace retires.
    pub fn record_guard_failure(&mut self, op_index: usize) {
        let n = self.guard_fail_counts.entry(op_index).or_insert(0);
        *n += 1;
        if *n >= GUARD_FAIL_LIMIT {
            self.state = TraceState::Invalid;
        }
    }

    pub fn op_count(&self) -> usize {
        self.ops.len()
    }

    pub fn count_kind(&self, pred: impl Fn(&TraceOpKind) -> bool) -> usize {
        self.ops.iter().filter(|op| pred(&op.kind)).count()
    }
}

/// Operand roles whose registers' cached flags an opcode invalidates when it
/// executes as an opaque call inside a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MutatedRole {
    P1,
    P2,
    P3,
}

/// Static side-effect table for opaque-call-producing opcodes: which operand
/// names a register whose flags the call may change.
pub struct SideEffectRegistry;

impl SideEffectRegistry {
    pub fn invalidated_roles(opcode: Opcode) -> &'static [MutatedRole] {
        match opcode {
            Opcode::Function => &[MutatedRole::P3],
            Opcode::AggStep => &[MutatedRole::P3],
            Opcode::AggFinal => &[MutatedRole::P1, MutatedRole::P3],
            _ => &[],
        }
    }
}

fn operand_text(op: TraceOperand) -> String {
    match op {
        TraceOperand::Val(v) => format!("v{v}"),
        TraceOperand::Imm(i) => i.to_string(),
    }
}

fn target_text(t: CallTarget) -> String {
    match t {
        CallTarget::Reg(r) => format!("r{r}"),
        CallTarget::AggCtx(r) => format!("agg[r{r}]"),
    }
}

/// Human-readable trace listing, grouped under `# opcode <Name>` comments for
/// every source instruction the recording covered, with an op-count footer.
pub fn dump_trace(trace: &Trace, program: &Program) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# trace: header_pc={} state={:?}\n",
        trace.header_pc, trace.state
    ));
    let mut by_origin: HashMap<usize, Vec<(usize, &TraceOp)>> = HashMap::new();
    for (i, op) in trace.ops.iter().enumerate() {
        by_origin.entry(op.origin_pc).or_default().push((i, op));
    }
    for &pc in &trace.covered_pcs {
        let name = program
            .instructions
            .get(pc)
            .map(|i| i.opcode.name())
            .unwrap_or("?");
        out.push_str(&format!("# opcode {name}\n"));
        if let Some(ops) = by_origin.get(&pc) {
            for &(i, op) in ops {
                out.push_str(&format!("  {}\n", op_text(i, op)));
            }
        }
    }
    out.push_str(&format!(
        "ops: {} -> {}\n",
        trace.ops_unoptimized,
        trace.ops.len()
    ));
    out
}

fn op_text(index: usize, op: &TraceOp) -> String {
    match &op.kind {
        TraceOpKind::ReadColumn { cursor, col, dest } => {
            format!("v{index} = read_column c{cursor}.{col} -> r{dest}")
        }
        TraceOpKind::CursorNext { cursor } => format!("v{index} = cursor_next c{cursor}"),
        TraceOpKind::ReadFlags { reg } => format!("v{index} = read_flags r{reg}"),
        TraceOpKind::ReadInt { reg } => format!("v{index} = read_int r{reg}"),
        TraceOpKind::ReadReal { reg } => format!("v{index} = read_real r{reg}"),
        TraceOpKind::ReadStr { reg } => format!("v{index} = read_str r{reg}"),
        TraceOpKind::WriteCell { reg, value } => format!("write_cell r{reg} = {value}"),
        TraceOpKind::Arith {
            op,
            lhs,
            rhs,
            dest,
            as_float,
        } => {
            let d = dest.map(|r| format!(" -> r{r}")).unwrap_or_default();
            let suffix = if *as_float { "_f" } else { "" };
            format!(
                "v{index} = {}{suffix}({}, {}){d}",
                op.name(),
                operand_text(*lhs),
                operand_text(*rhs)
            )
        }
        TraceOpKind::AffinityReal { reg } => format!("affinity_real r{reg}"),
        TraceOpKind::PackRecord { first, arity, dest } => {
            format!(
                "pack_record r{first}..r{} -> r{dest}",
                first + *arity as i32 - 1
            )
        }
        TraceOpKind::CallOpaque {
            name,
            n_args,
            first_arg,
            target,
            ..
        } => format!(
            "call_opaque {name}/{n_args}(r{first_arg}..) -> {}",
            target_text(*target)
        ),
        TraceOpKind::InlineEval {
            name,
            n_args,
            first_arg,
            target,
            ..
        } => format!(
            "inline_eval {name}/{n_args}(r{first_arg}..) -> {}",
            target_text(*target)
        ),
        TraceOpKind::EmitRow { first, count } => {
            format!("emit_row r{first}..r{}", first + count - 1)
        }
        TraceOpKind::Guard(g) => match &g.kind {
            GuardKind::Value { operand, expected } => {
                format!("guard_value v{operand}, {expected} [exit -> {}]", g.exit_pc)
            }
            GuardKind::True { operand } => {
                format!("guard_true v{operand} [exit -> {}]", g.exit_pc)
            }
            GuardKind::False { operand } => {
                format!("guard_false v{operand} [exit -> {}]", g.exit_pc)
            }
            GuardKind::NoOverflow { operand } => {
                format!("guard_no_overflow v{operand} [exit -> {}]", g.exit_pc)
            }
            GuardKind::Flags { reg, expected } => {
                format!(
                    "guard_flags r{reg}, {expected:#06x} [exit -> {}]",
                    g.exit_pc
                )
            }
        },
    }
}
