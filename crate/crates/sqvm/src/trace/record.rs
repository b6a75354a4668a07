//! Trace recording: one loop iteration of interpreter work captured as
//! straight-line ops with guards pinning every observed branch outcome.
//!
//! The recorder is driven by the opcode handlers: each handler reports what
//! it observed (flags, encoded column results, branch outcomes) and the
//! recorder appends the ops a trace execution will need to reproduce the
//! iteration, plus a guard wherever the interpreter could have gone another
//! way.

use std::collections::HashMap;
use std::rc::Rc;

use crate::compiler::{Instruction, Opcode};
use crate::value::{ArithKind, ValueCell};
use crate::vm::ExecMode;

use super::{
    CallTarget, Guard, GuardKind, MutatedRole, SideEffectRegistry, Trace, TraceArith, TraceOp,
    TraceOpKind, TraceOperand, TraceState, ValId,
};

pub struct Recorder {
    pub header_pc: usize,
    pub ops: Vec<TraceOp>,
    covered_pcs: Vec<usize>,
}

impl Recorder {
    pub fn new(header_pc: usize) -> Recorder {
        Recorder {
            header_pc,
            ops: Vec::new(),
            covered_pcs: Vec::new(),
        }
    }

    fn push(&mut self, kind: TraceOpKind, origin_pc: usize) -> ValId {
        if self.covered_pcs.last() != Some(&origin_pc) {
            self.covered_pcs.push(origin_pc);
        }
        self.ops.push(TraceOp { kind, origin_pc });
        self.ops.len() - 1
    }

    fn push_guard(&mut self, kind: GuardKind, origin_pc: usize, exit_pc: usize) {
        self.push(TraceOpKind::Guard(Guard { kind, exit_pc }), origin_pc);
    }

    /// The modeled flags load plus the type guard pinning what was read.
    fn guard_flags(&mut self, pc: usize, reg: i32, flags: u16) {
        self.push(TraceOpKind::ReadFlags { reg }, pc);
        self.push_guard(
            GuardKind::Flags {
                reg,
                expected: flags,
            },
            pc,
            pc,
        );
    }

    /// Typed payload load for an operand, chosen by its observed flags.
    fn load_payload(&mut self, pc: usize, reg: i32, cell: &ValueCell) -> ValId {
        if cell.is_int() && !cell.is_real() {
            self.push(TraceOpKind::ReadInt { reg }, pc)
        } else if cell.is_real() {
            self.push(TraceOpKind::ReadReal { reg }, pc)
        } else {
            self.push(TraceOpKind::ReadStr { reg }, pc)
        }
    }

    pub fn on_cursor_next(&mut self, pc: usize, cursor: i32) {
        let vid = self.push(TraceOpKind::CursorNext { cursor }, pc);
        // on exhaustion the cursor has already advanced to the end, so the
        // side exit resumes at Next's fall-through
        self.push_guard(
            GuardKind::Value {
                operand: vid,
                expected: 0,
            },
            pc,
            pc + 1,
        );
    }

    pub fn on_column(&mut self, pc: usize, cursor: i32, col: i32, dest: i32, encoded: u32) {
        let vid = self.push(TraceOpKind::ReadColumn { cursor, col, dest }, pc);
        self.push_guard(
            GuardKind::Value {
                operand: vid,
                expected: encoded,
            },
            pc,
            pc,
        );
    }

    pub fn on_real_affinity(&mut self, pc: usize, reg: i32, before_flags: u16) {
        self.guard_flags(pc, reg, before_flags);
        self.push(TraceOpKind::AffinityReal { reg }, pc);
    }

    pub fn on_emit_row(&mut self, pc: usize, first: i32, count: i32) {
        self.push(TraceOpKind::EmitRow { first, count }, pc);
    }

    pub fn on_write_const(&mut self, pc: usize, reg: i32, value: ValueCell) {
        self.push(TraceOpKind::WriteCell { reg, value }, pc);
    }

    /// NotNull/IsNull: the flags guard alone pins the branch.
    pub fn on_flag_branch(&mut self, pc: usize, reg: i32, flags: u16) {
        self.guard_flags(pc, reg, flags);
    }

    pub fn on_ifpos(&mut self, pc: usize, reg: i32, flags: u16, is_int: bool, taken: bool) {
        self.guard_flags(pc, reg, flags);
        if is_int {
            let v = self.push(TraceOpKind::ReadInt { reg }, pc);
            let cmp = self.push(
                TraceOpKind::Arith {
                    op: TraceArith::CmpGt,
                    lhs: TraceOperand::Val(v),
                    rhs: TraceOperand::Imm(0),
                    dest: None,
                    as_float: false,
                },
                pc,
            );
            let kind = if taken {
                GuardKind::True { operand: cmp }
            } else {
                GuardKind::False { operand: cmp }
            };
            self.push_guard(kind, pc, pc);
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_arith(
        &mut self,
        pc: usize,
        kind: ArithKind,
        lhs_reg: i32,
        lhs: &ValueCell,
        rhs_reg: i32,
        rhs: &ValueCell,
        dest: i32,
        result: &ValueCell,
    ) {
        self.guard_flags(pc, lhs_reg, lhs.flags());
        self.guard_flags(pc, rhs_reg, rhs.flags());
        if result.is_null() {
            self.push(
                TraceOpKind::WriteCell {
                    reg: dest,
                    value: ValueCell::null(),
                },
                pc,
            );
            return;
        }
        let op = match kind {
            ArithKind::Add => TraceArith::Add,
            ArithKind::Sub => TraceArith::Sub,
            ArithKind::Mul => TraceArith::Mul,
        };
        let ints_only = lhs.is_int() && !lhs.is_real() && rhs.is_int() && !rhs.is_real();
        if ints_only && result.is_int() {
            let a = self.push(TraceOpKind::ReadInt { reg: lhs_reg }, pc);
            let b = self.push(TraceOpKind::ReadInt { reg: rhs_reg }, pc);
            let v = self.push(
                TraceOpKind::Arith {
                    op,
                    lhs: TraceOperand::Val(a),
                    rhs: TraceOperand::Val(b),
                    dest: Some(dest),
                    as_float: false,
                },
                pc,
            );
            self.push_guard(GuardKind::NoOverflow { operand: v }, pc, pc);
        } else {
            // a real operand, or an integer overflow observed while recording
            let a = self.load_payload(pc, lhs_reg, lhs);
            let b = self.load_payload(pc, rhs_reg, rhs);
            self.push(
                TraceOpKind::Arith {
                    op,
                    lhs: TraceOperand::Val(a),
                    rhs: TraceOperand::Val(b),
                    dest: Some(dest),
                    as_float: true,
                },
                pc,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_compare(
        &mut self,
        pc: usize,
        opcode: Opcode,
        l_reg: i32,
        lhs: &ValueCell,
        r_reg: i32,
        rhs: &ValueCell,
        taken: Option<bool>,
    ) {
        self.guard_flags(pc, l_reg, lhs.flags());
        self.guard_flags(pc, r_reg, rhs.flags());
        let Some(taken) = taken else {
            // a NULL operand: the flags guards pin the fall-through
            return;
        };
        let op = match opcode {
            Opcode::Eq => TraceArith::CmpEq,
            Opcode::Ne => TraceArith::CmpNe,
            Opcode::Lt => TraceArith::CmpLt,
            Opcode::Le => TraceArith::CmpLe,
            Opcode::Gt => TraceArith::CmpGt,
            Opcode::Ge => TraceArith::CmpGe,
            _ => unreachable!("not a comparison opcode"),
        };
        let a = self.load_payload(pc, l_reg, lhs);
        let b = self.load_payload(pc, r_reg, rhs);
        let cmp = self.push(
            TraceOpKind::Arith {
                op,
                lhs: TraceOperand::Val(a),
                rhs: TraceOperand::Val(b),
                dest: None,
                as_float: false,
            },
            pc,
        );
        let kind = if taken {
            GuardKind::True { operand: cmp }
        } else {
            GuardKind::False { operand: cmp }
        };
        self.push_guard(kind, pc, pc);
    }

    /// MakeRecord with the register loop unrolled: one flags read and guard
    /// per packed register, then the pack itself.
    pub fn on_make_record(
        &mut self,
        pc: usize,
        first: i32,
        arity: usize,
        flags: &[u16],
        dest: i32,
    ) {
        for (i, f) in flags.iter().enumerate() {
            self.guard_flags(pc, first + i as i32, *f);
        }
        self.push(TraceOpKind::PackRecord { first, arity, dest }, pc);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn on_call(
        &mut self,
        pc: usize,
        opcode: Opcode,
        name: &str,
        n_args: usize,
        first_arg: i32,
        target: CallTarget,
        scripted: bool,
        host: bool,
        mode: ExecMode,
        inst: &Instruction,
    ) {
        if scripted && mode != ExecMode::NoInline {
            self.push(
                TraceOpKind::InlineEval {
                    name: name.to_string(),
                    n_args,
                    first_arg,
                    target,
                    host,
                },
                pc,
            );
        } else {
            let mutated = SideEffectRegistry::invalidated_roles(opcode)
                .iter()
                .map(|role| match role {
                    MutatedRole::P1 => inst.p1,
                    MutatedRole::P2 => inst.p2,
                    MutatedRole::P3 => inst.p3,
                })
                .collect();
            self.push(
                TraceOpKind::CallOpaque {
                    name: name.to_string(),
                    n_args,
                    first_arg,
                    target,
                    mutated,
                    host,
                },
                pc,
            );
        }
    }

    pub fn finish(self, program_id: u64) -> Trace {
        let ops_unoptimized = self.ops.len();
        Trace {
            ops: Rc::new(self.ops),
            header_pc: self.header_pc,
            program_id,
            state: TraceState::Recorded,
            ops_unoptimized,
            covered_pcs: self.covered_pcs,
            guard_fail_counts: HashMap::new(),
        }
    }
}
