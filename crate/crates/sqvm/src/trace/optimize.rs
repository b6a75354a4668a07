//! Trace optimization passes.
//!
//! In order: (1) the flags-cache pass deletes redundant `ReadFlags` ops,
//! (2) guard folding deletes `Flags` guards the cache already proves,
//! (3) `AffinityReal` ops on registers known to hold reals are deleted,
//! (4) dead typed loads whose values nothing consumes are removed.
//! The no-flags ablation skips passes 1-3. Passes only ever delete ops, so
//! optimization never grows a trace.

use std::collections::HashMap;
use std::rc::Rc;

use crate::value::{decode_column_result, FLAG_INT, FLAG_REAL};
use crate::vm::ExecMode;

use super::{
    CallTarget, GuardKind, Trace, TraceArith, TraceOp, TraceOpKind, TraceOperand, TraceState,
};

/// Per-register known flags along the trace, rebuilt per pass.
#[derive(Default)]
struct FlagsCache {
    known: HashMap<i32, u16>,
}

impl FlagsCache {
    fn get(&self, reg: i32) -> Option<u16> {
        self.known.get(&reg).copied()
    }

    /// Apply one op's effect on the cache. Deleted ops are skipped by the
    /// passes; every deletable op's effect is a no-op on the cache state it
    /// was deleted under, so skipping preserves the walk.
    fn advance(&mut self, ops: &[TraceOp], idx: usize) {
        match &ops[idx].kind {
            TraceOpKind::ReadColumn { dest, .. } => {
                self.known.remove(dest);
            }
            TraceOpKind::Guard(g) => match &g.kind {
                GuardKind::Value { operand, expected } => {
                    // a guard on an encoded Column result proves the
                    // destination register's flags
                    if let TraceOpKind::ReadColumn { dest, .. } = &ops[*operand].kind {
                        let (_rc, flags) = decode_column_result(*expected);
                        self.known.insert(*dest, flags);
                    }
                }
                GuardKind::Flags { reg, expected } => {
                    self.known.insert(*reg, *expected);
                }
                _ => {}
            },
            TraceOpKind::WriteCell { reg, value } => {
                self.known.insert(*reg, value.flags());
            }
            TraceOpKind::Arith {
                op,
                dest: Some(d),
                as_float,
                ..
            } => {
                if matches!(op, TraceArith::Add | TraceArith::Sub | TraceArith::Mul) {
                    self.known
                        .insert(*d, if *as_float { FLAG_REAL } else { FLAG_INT });
                }
            }
            TraceOpKind::AffinityReal { reg } => match self.get(*reg) {
                Some(e) if e & FLAG_INT != 0 => {
                    self.known.insert(*reg, (e & !FLAG_INT) | FLAG_REAL);
                }
                Some(_) => {}
                None => {
                    // unknown input: the op may or may not have converted
                    self.known.remove(reg);
                }
            },
            TraceOpKind::PackRecord { dest, .. } => {
                self.known.remove(dest);
            }
            TraceOpKind::CallOpaque { mutated, .. } => {
                for r in mutated {
                    self.known.remove(r);
                }
            }
            TraceOpKind::InlineEval {
                target: CallTarget::Reg(r),
                ..
            } => {
                self.known.remove(r);
            }
            _ => {}
        }
    }
}

/// Rebuild the op list without the marked ops, remapping value references.
fn rebuild(ops: &[TraceOp], delete: &[bool]) -> Vec<TraceOp> {
    let mut remap: Vec<Option<usize>> = vec![None; ops.len()];
    let mut kept = 0usize;
    for (i, del) in delete.iter().enumerate() {
        if !del {
            remap[i] = Some(kept);
            kept += 1;
        }
    }
    let map = |v: usize| remap[v].expect("deleted op is still referenced");
    ops.iter()
        .zip(delete)
        .filter(|(_, del)| !**del)
        .map(|(op, _)| {
            let mut op = op.clone();
            match &mut op.kind {
                TraceOpKind::Arith { lhs, rhs, .. } => {
                    if let TraceOperand::Val(v) = lhs {
                        *v = map(*v);
                    }
                    if let TraceOperand::Val(v) = rhs {
                        *v = map(*v);
                    }
                }
                TraceOpKind::Guard(g) => match &mut g.kind {
                    GuardKind::Value { operand, .. }
                    | GuardKind::True { operand }
                    | GuardKind::False { operand }
                    | GuardKind::NoOverflow { operand } => *operand = map(*operand),
                    GuardKind::Flags { .. } => {}
                },
                _ => {}
            }
            op
        })
        .collect()
}

/// Pass 1: delete `ReadFlags` ops whose register's flags the cache already
/// knows.
fn pass_flags_cache(ops: Vec<TraceOp>) -> Vec<TraceOp> {
    let mut cache = FlagsCache::default();
    let mut delete = vec![false; ops.len()];
    for i in 0..ops.len() {
        if let TraceOpKind::ReadFlags { reg } = &ops[i].kind {
            if cache.get(*reg).is_some() {
                delete[i] = true;
                continue;
            }
        }
        cache.advance(&ops, i);
    }
    rebuild(&ops, &delete)
}

/// Pass 2: delete `Flags` guards the cache proves.
fn pass_guard_folding(ops: Vec<TraceOp>) -> Vec<TraceOp> {
    let mut cache = FlagsCache::default();
    let mut delete = vec![false; ops.len()];
    for i in 0..ops.len() {
        if let TraceOpKind::Guard(g) = &ops[i].kind {
            if let GuardKind::Flags { reg, expected } = &g.kind {
                if cache.get(*reg) == Some(*expected) {
                    delete[i] = true;
                    continue;
                }
            }
        }
        cache.advance(&ops, i);
    }
    rebuild(&ops, &delete)
}

/// Pass 3: delete `AffinityReal` dynamic checks on registers the cache knows
/// already hold reals.
fn pass_affinity(ops: Vec<TraceOp>) -> Vec<TraceOp> {
    let mut cache = FlagsCache::default();
    let mut delete = vec![false; ops.len()];
    for i in 0..ops.len() {
        if let TraceOpKind::AffinityReal { reg } = &ops[i].kind {
            if let Some(e) = cache.get(*reg) {
                if e & FLAG_REAL != 0 && e & FLAG_INT == 0 {
                    delete[i] = true;
                    continue;
                }
            }
        }
        cache.advance(&ops, i);
    }
    rebuild(&ops, &delete)
}

/// Pass 4: delete typed payload loads whose values nothing consumes.
/// `ReadFlags` is exempt; removing flag reads is the flags-cache pass's job
/// and the no-flags ablation must keep them.
fn pass_dead_values(ops: Vec<TraceOp>) -> Vec<TraceOp> {
    let mut used = vec![false; ops.len()];
    for op in &ops {
        match &op.kind {
            TraceOpKind::Arith { lhs, rhs, .. } => {
                if let TraceOperand::Val(v) = lhs {
                    used[*v] = true;
                }
                if let TraceOperand::Val(v) = rhs {
                    used[*v] = true;
                }
            }
            TraceOpKind::Guard(g) => match &g.kind {
                GuardKind::Value { operand, .. }
                | GuardKind::True { operand }
                | GuardKind::False { operand }
                | GuardKind::NoOverflow { operand } => used[*operand] = true,
                GuardKind::Flags { .. } => {}
            },
            _ => {}
        }
    }
    let delete: Vec<bool> = ops
        .iter()
        .enumerate()
        .map(|(i, op)| {
            matches!(
                op.kind,
                TraceOpKind::ReadInt { .. }
                    | TraceOpKind::ReadReal { .. }
                    | TraceOpKind::ReadStr { .. }
            ) && !used[i]
        })
        .collect();
    rebuild(&ops, &delete)
}

/// Produce the optimized form of a recorded trace. The no-flags mode skips
/// the flags-cache, guard-folding, and affinity passes; the no-inline mode
/// acts at record time, so it changes nothing here.
pub fn optimize_trace(trace: &Trace, mode: ExecMode) -> Trace {
    let mut ops: Vec<TraceOp> = (*trace.ops).clone();
    if mode != ExecMode::NoFlags {
        ops = pass_flags_cache(ops);
        ops = pass_guard_folding(ops);
        ops = pass_affinity(ops);
    }
    ops = pass_dead_values(ops);
    debug_assert!(ops.len() <= trace.ops_unoptimized);
    Trace {
        ops: Rc::new(ops),
        header_pc: trace.header_pc,
        program_id: trace.program_id,
        state: TraceState::Optimized,
        ops_unoptimized: trace.ops_unoptimized,
        covered_pcs: trace.covered_pcs.clone(),
        guard_fail_counts: HashMap::new(),
    }
}
