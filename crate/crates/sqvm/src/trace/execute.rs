//! Guarded execution of an optimized trace against a live statement.
//!
//! Ops run in order against the statement's registers and cursors. A failing
//! guard counts toward the trace's retirement limit and hands control back to
//! the interpreter at the guard's exit pc with all register state exactly as
//! the interpreter would have left it.

use crate::hostapi::{eval_scripted, AggStepImpl, FunctionImpl};
use crate::value::{apply_real_affinity, ValueCell};
use crate::vm::{AggContext, ErrorKind, Statement};

use super::{CallTarget, GuardKind, TraceArith, TraceOpKind, TraceOperand, TraceState};

/// Result of running a trace for one loop iteration.
#[derive(Debug)]
pub enum TraceOutcome {
    /// The iteration completed; the statement is back at the loop header.
    ContinueLoop,
    /// A guard failed; interpret from the contained pc.
    SideExit(usize),
    /// The trace suspended the statement with a result row, as an
    /// interpreted `ResultRow` would.
    EmittedRow,
    Error(ErrorKind, String),
}

#[derive(Clone, Debug, PartialEq)]
enum TVal {
    None,
    I(i64),
    F(f64),
    S(String),
}

impl TVal {
    fn as_i64(&self) -> i64 {
        match self {
            TVal::I(v) => *v,
            TVal::F(v) => *v as i64,
            _ => 0,
        }
    }

    fn as_f64(&self) -> f64 {
        match self {
            TVal::I(v) => *v as f64,
            TVal::F(v) => *v,
            _ => 0.0,
        }
    }
}

fn fail_guard(
    stmt: &mut Statement,
    key: (u64, usize),
    op_index: usize,
    exit_pc: usize,
) -> TraceOutcome {
    let mut jit = stmt.conn.inner.jit.borrow_mut();
    let invalidated = if let Some(t) = jit.traces.get_mut(&key) {
        t.record_guard_failure(op_index);
        t.state == TraceState::Invalid
    } else {
        false
    };
    if invalidated {
        // retirement starts the hot counter over so the loop can re-trace
        jit.invalidations += 1;
        jit.reset_counter(key);
    }
    drop(jit);
    stmt.pc = exit_pc;
    TraceOutcome::SideExit(exit_pc)
}

fn compare_tvals(op: TraceArith, a: &TVal, b: &TVal) -> bool {
    use std::cmp::Ordering;
    let ord = match (a, b) {
        (TVal::S(x), TVal::S(y)) => x.as_bytes().cmp(y.as_bytes()),
        (TVal::S(_), _) => Ordering::Greater,
        (_, TVal::S(_)) => Ordering::Less,
        (TVal::I(x), TVal::I(y)) => x.cmp(y),
        _ => a
            .as_f64()
            .partial_cmp(&b.as_f64())
            .unwrap_or(Ordering::Equal),
    };
    match op {
        TraceArith::CmpEq => ord == Ordering::Equal,
        TraceArith::CmpNe => ord != Ordering::Equal,
        TraceArith::CmpLt => ord == Ordering::Less,
        TraceArith::CmpLe => ord != Ordering::Greater,
        TraceArith::CmpGt => ord == Ordering::Greater,
        TraceArith::CmpGe => ord != Ordering::Less,
        _ => unreachable!("not a comparison"),
    }
}

/// Run the optimized trace attached at the statement's current pc.
pub fn execute_trace(stmt: &mut Statement) -> TraceOutcome {
    let key = (stmt.program_id, stmt.pc);
    let (ops, header_pc) = {
        let jit = stmt.conn.inner.jit.borrow();
        let t = match jit.traces.get(&key) {
            Some(t) if t.state == TraceState::Optimized => t,
            _ => return TraceOutcome::SideExit(stmt.pc),
        };
        (std::rc::Rc::clone(&t.ops), t.header_pc)
    };
    debug_assert!(!ops.is_empty(), "an empty trace must never be attached");

    let mut vals: Vec<TVal> = Vec::with_capacity(ops.len());
    let mut overflowed: Vec<bool> = vec![false; ops.len()];
    let mut emitted = false;

    for (i, op) in ops.iter().enumerate() {
        let mut val = TVal::None;
        match &op.kind {
            TraceOpKind::ReadColumn { cursor, col, dest } => {
                let res = match stmt.cursors[*cursor as usize].as_ref() {
                    Some(c) => c.column(*col as usize),
                    None => {
                        return TraceOutcome::Error(
                            ErrorKind::Usage,
                            format!("cursor {cursor} is not open"),
                        )
                    }
                };
                match res {
                    Ok((cell, encoded)) => {
                        stmt.registers[*dest as usize] = cell;
                        val = TVal::I(encoded as i64);
                    }
                    Err(e) => return TraceOutcome::Error(ErrorKind::Usage, e.to_string()),
                }
            }
            TraceOpKind::CursorNext { cursor } => {
                let res = match stmt.cursors[*cursor as usize].as_mut() {
                    Some(c) => c.next(),
                    None => {
                        return TraceOutcome::Error(
                            ErrorKind::Usage,
                            format!("cursor {cursor} is not open"),
                        )
                    }
                };
                match res {
                    Ok(has_more) => val = TVal::I(if has_more { 0 } else { 1 }),
                    Err(e) => return TraceOutcome::Error(ErrorKind::Usage, e.to_string()),
                }
            }
            TraceOpKind::ReadFlags { reg } => {
                stmt.conn.inner.metrics.borrow_mut().read_flags_executed += 1;
                val = TVal::I(stmt.registers[*reg as usize].flags() as i64);
            }
            TraceOpKind::ReadInt { reg } => {
                val = TVal::I(stmt.registers[*reg as usize].as_int());
            }
            TraceOpKind::ReadReal { reg } => {
                val = TVal::F(stmt.registers[*reg as usize].as_real());
            }
            TraceOpKind::ReadStr { reg } => {
                val = TVal::S(
                    stmt.registers[*reg as usize]
                        .as_str()
                        .unwrap_or("")
                        .to_string(),
                );
            }
            TraceOpKind::WriteCell { reg, value } => {
                stmt.registers[*reg as usize] = value.clone();
            }
            TraceOpKind::Arith {
                op: a_op,
                lhs,
                rhs,
                dest,
                as_float,
            } => {
                let lv = match lhs {
                    TraceOperand::Val(v) => vals[*v].clone(),
                    TraceOperand::Imm(v) => TVal::I(*v),
                };
                let rv = match rhs {
                    TraceOperand::Val(v) => vals[*v].clone(),
                    TraceOperand::Imm(v) => TVal::I(*v),
                };
                match a_op {
                    TraceArith::Add | TraceArith::Sub | TraceArith::Mul => {
                        if *as_float {
                            let (x, y) = (lv.as_f64(), rv.as_f64());
                            let r = match a_op {
                                TraceArith::Add => x + y,
                                TraceArith::Sub => x - y,
                                TraceArith::Mul => x * y,
                                _ => unreachable!(),
                            };
                            if let Some(d) = dest {
                                stmt.registers[*d as usize] = ValueCell::real(r);
                            }
                            val = TVal::F(r);
                        } else {
                            let (x, y) = (lv.as_i64(), rv.as_i64());
                            let r = match a_op {
                                TraceArith::Add => x.checked_add(y),
                                TraceArith::Sub => x.checked_sub(y),
                                TraceArith::Mul => x.checked_mul(y),
                                _ => unreachable!(),
                            };
                            match r {
                                Some(v) => {
                                    if let Some(d) = dest {
                                        stmt.registers[*d as usize] = ValueCell::int(v);
                                    }
                                    val = TVal::I(v);
                                }
                                None => {
                                    // leave the register untouched; the
                                    // following overflow guard side-exits and
                                    // the interpreter redoes the operation
                                    overflowed[i] = true;
                                }
                            }
                        }
                    }
                    _ => {
                        val = TVal::I(compare_tvals(*a_op, &lv, &rv) as i64);
                    }
                }
            }
            TraceOpKind::AffinityReal { reg } => {
                let cell = apply_real_affinity(&stmt.registers[*reg as usize]);
                stmt.registers[*reg as usize] = cell;
            }
            TraceOpKind::PackRecord { first, arity, dest } => {
                let cells: Vec<ValueCell> = (*first..*first + *arity as i32)
                    .map(|r| stmt.registers[r as usize].clone())
                    .collect();
                let size: u64 = cells.iter().map(ValueCell::payload_size).sum();
                if size > stmt.conn.inner.record_size_limit.get() {
                    return TraceOutcome::Error(
                        ErrorKind::TooBig,
                        format!("record of {size} bytes exceeds the size cap"),
                    );
                }
                stmt.registers[*dest as usize] = ValueCell::record(cells);
            }
            TraceOpKind::CallOpaque {
                name,
                n_args,
                first_arg,
                target,
                host,
                ..
            } => {
                stmt.conn.inner.metrics.borrow_mut().opaque_calls_executed += 1;
                if let Err(out) = run_call(stmt, name, *n_args, *first_arg, *target, *host) {
                    return out;
                }
            }
            TraceOpKind::InlineEval {
                name,
                n_args,
                first_arg,
                target,
                host,
            } => {
                if let Err(out) = run_call(stmt, name, *n_args, *first_arg, *target, *host) {
                    return out;
                }
            }
            TraceOpKind::EmitRow { first, count } => {
                stmt.result_window = Some((*first, *count));
                emitted = true;
            }
            TraceOpKind::Guard(g) => {
                let holds = match &g.kind {
                    GuardKind::Value { operand, expected } => {
                        vals[*operand].as_i64() == *expected as i64
                    }
                    GuardKind::True { operand } => vals[*operand] == TVal::I(1),
                    GuardKind::False { operand } => vals[*operand] == TVal::I(0),
                    GuardKind::NoOverflow { operand } => !overflowed[*operand],
                    GuardKind::Flags { reg, expected } => {
                        stmt.registers[*reg as usize].flags() == *expected
                    }
                };
                if !holds {
                    return fail_guard(stmt, key, i, g.exit_pc);
                }
            }
        }
        vals.push(val);
        if emitted {
            break;
        }
    }

    stmt.pc = header_pc;
    if emitted {
        TraceOutcome::EmittedRow
    } else {
        TraceOutcome::ContinueLoop
    }
}

/// Shared scalar/aggregate call path for both opaque and inlined trace ops.
/// Returns `Err` with the outcome to propagate on host failure.
fn run_call(
    stmt: &mut Statement,
    name: &str,
    n_args: usize,
    first_arg: i32,
    target: CallTarget,
    host: bool,
) -> Result<(), TraceOutcome> {
    let args: Vec<ValueCell> = (first_arg..first_arg + n_args as i32)
        .map(|r| stmt.registers[r as usize].clone())
        .collect();
    match target {
        CallTarget::Reg(dest) => {
            let Some(f) = stmt.conn.lookup_function(name, n_args) else {
                return Err(TraceOutcome::Error(
                    ErrorKind::Usage,
                    format!("no such function '{name}'/{n_args}"),
                ));
            };
            if host {
                stmt.conn.tick_host_callback(n_args as u64, 1);
            }
            let result = match &f.imp {
                FunctionImpl::Scripted(expr) => Ok(eval_scripted(expr, &args, None)),
                FunctionImpl::Native(nf) => nf(&stmt.conn, &args),
            };
            match result {
                Ok(v) => {
                    stmt.registers[dest as usize] = v;
                    Ok(())
                }
                Err(he) => Err(TraceOutcome::Error(ErrorKind::AbortDueToError, he.message)),
            }
        }
        CallTarget::AggCtx(ctx_reg) => {
            let Some(agg) = stmt.conn.lookup_aggregate(name, n_args) else {
                return Err(TraceOutcome::Error(
                    ErrorKind::Usage,
                    format!("no such aggregate '{name}'/{n_args}"),
                ));
            };
            let acc = stmt
                .agg_contexts
                .get(&ctx_reg)
                .map(|c| c.acc.clone())
                .unwrap_or_else(|| agg.init.clone());
            if host {
                stmt.conn.tick_host_callback(n_args as u64 + 1, 1);
            }
            let result = match &agg.step {
                AggStepImpl::Scripted(expr) => Ok(eval_scripted(expr, &args, Some(&acc))),
                AggStepImpl::Native(f) => f(&stmt.conn, &acc, &args),
            };
            match result {
                Ok(new_acc) => {
                    let ctx = stmt.agg_contexts.entry(ctx_reg).or_insert(AggContext {
                        acc: ValueCell::null(),
                        steps: 0,
                    });
                    ctx.acc = new_acc;
                    ctx.steps += 1;
                    Ok(())
                }
                Err(he) => Err(TraceOutcome::Error(ErrorKind::AbortDueToError, he.message)),
            }
        }
    }
}
