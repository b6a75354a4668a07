//! SQL-subset compiler targeting a register bytecode.
//!
//! Programs follow the classic SQLite layout: instruction 0 is `Init`, which
//! jumps to a trailer (`Transaction`, `TableLock`s, `Goto` back to the body);
//! the body opens cursors, loops with `Rewind`/`Next`, and emits rows with
//! `ResultRow`.

pub mod codegen;
pub mod parser;

use std::fmt;

pub use codegen::{codegen, BindError, CallableKind, FunctionResolver};
pub use parser::{parse, Ast, SyntaxError};

/// Every opcode the interpreter dispatches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Opcode {
    Init,
    Goto,
    Gosub,
    Return,
    Halt,
    Transaction,
    TableLock,
    OpenRead,
    OpenWrite,
    Rewind,
    Next,
    Column,
    RealAffinity,
    ResultRow,
    Close,
    IfPos,
    NotNull,
    IsNull,
    MakeRecord,
    Insert,
    NewRowid,
    Integer,
    Real,
    String,
    Null,
    Variable,
    Add,
    Sub,
    Mul,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Function,
    AggStep,
    AggFinal,
}

pub const ALL_OPCODES: [Opcode; 38] = [
    Opcode::Init,
    Opcode::Goto,
    Opcode::Gosub,
    Opcode::Return,
    Opcode::Halt,
    Opcode::Transaction,
    Opcode::TableLock,
    Opcode::OpenRead,
    Opcode::OpenWrite,
    Opcode::Rewind,
    Opcode::Next,
    Opcode::Column,
    Opcode::RealAffinity,
    Opcode::ResultRow,
    Opcode::Close,
    Opcode::IfPos,
    Opcode::NotNull,
    Opcode::IsNull,
    Opcode::MakeRecord,
    Opcode::Insert,
    Opcode::NewRowid,
    Opcode::Integer,
    Opcode::Real,
    Opcode::String,
    Opcode::Null,
    Opcode::Variable,
    Opcode::Add,
    Opcode::Sub,
    Opcode::Mul,
    Opcode::Eq,
    Opcode::Ne,
    Opcode::Lt,
    Opcode::Le,
    Opcode::Gt,
    Opcode::Ge,
    Opcode::Function,
    Opcode::AggStep,
    Opcode::AggFinal,
];

impl Opcode {
    pub fn name(self) -> &'static str {
        match self {
            Opcode::Init => "Init",
            Opcode::Goto => "Goto",
            Opcode::Gosub => "Gosub",
            Opcode::Return => "Return",
            Opcode::Halt => "Halt",
            Opcode::Transaction => "Transaction",
            Opcode::TableLock => "TableLock",
            Opcode::OpenRead => "OpenRead",
            Opcode::OpenWrite => "OpenWrite",
            Opcode::Rewind => "Rewind",
            Opcode::Next => "Next",
            Opcode::Column => "Column",
            Opcode::RealAffinity => "RealAffinity",
            Opcode::ResultRow => "ResultRow",
            Opcode::Close => "Close",
            Opcode::IfPos => "IfPos",
            Opcode::NotNull => "NotNull",
            Opcode::IsNull => "IsNull",
            Opcode::MakeRecord => "MakeRecord",
            Opcode::Insert => "Insert",
            Opcode::NewRowid => "NewRowid",
            Opcode::Integer => "Integer",
            Opcode::Real => "Real",
            Opcode::String => "String",
            Opcode::Null => "Null",
            Opcode::Variable => "Variable",
            Opcode::Add => "Add",
            Opcode::Sub => "Sub",
            Opcode::Mul => "Mul",
            Opcode::Eq => "Eq",
            Opcode::Ne => "Ne",
            Opcode::Lt => "Lt",
            Opcode::Le => "Le",
            Opcode::Gt => "Gt",
            Opcode::Ge => "Ge",
            Opcode::Function => "Function",
            Opcode::AggStep => "AggStep",
            Opcode::AggFinal => "AggFinal",
        }
    }

    pub fn from_name(name: &str) -> Option<Opcode> {
        ALL_OPCODES.iter().copied().find(|op| op.name() == name)
    }

    /// True for opcodes whose p2 is a jump target.
    pub fn p2_is_jump(self) -> bool {
        matches!(
            self,
            Opcode::Init
                | Opcode::Goto
                | Opcode::Gosub
                | Opcode::Rewind
                | Opcode::Next
                | Opcode::IfPos
                | Opcode::NotNull
                | Opcode::IsNull
                | Opcode::Eq
                | Opcode::Ne
                | Opcode::Lt
                | Opcode::Le
                | Opcode::Gt
                | Opcode::Ge
        )
    }

    /// True for opcodes whose p1 is a cursor index.
    pub fn p1_is_cursor(self) -> bool {
        matches!(
            self,
            Opcode::OpenRead
                | Opcode::OpenWrite
                | Opcode::Rewind
                | Opcode::Next
                | Opcode::Column
                | Opcode::Close
                | Opcode::NewRowid
                | Opcode::Insert
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The variable-size p4 operand.
#[derive(Clone, Debug, PartialEq)]
pub enum P4 {
    None,
    Int64(i64),
    Float64(f64),
    Text(String),
    /// Function or aggregate reference resolved against the registry.
    Func {
        name: String,
        n_args: usize,
    },
    /// Register count packed by `MakeRecord`.
    Arity(usize),
}

impl P4 {
    fn render(&self) -> String {
        match self {
            P4::None => String::new(),
            P4::Int64(v) => v.to_string(),
            P4::Float64(v) => format!("{v}"),
            P4::Text(s) => s.clone(),
            P4::Func { name, n_args } => format!("{name}({n_args})"),
            P4::Arity(n) => n.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub opcode: Opcode,
    pub p1: i32,
    pub p2: i32,
    pub p3: i32,
    pub p4: P4,
    pub p5: u8,
}

impl Instruction {
    pub fn new(opcode: Opcode, p1: i32, p2: i32, p3: i32) -> Self {
        Instruction {
            opcode,
            p1,
            p2,
            p3,
            p4: P4::None,
            p5: 0,
        }
    }

    pub fn with_p4(opcode: Opcode, p1: i32, p2: i32, p3: i32, p4: P4) -> Self {
        Instruction {
            opcode,
            p1,
            p2,
            p3,
            p4,
            p5: 0,
        }
    }
}

/// Program-structure violation found by [`Program::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramError(pub String);

impl fmt::Display for ProgramError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid program: {}", self.0)
    }
}

impl std::error::Error for ProgramError {}

/// A compiled query program.
#[derive(Clone, Debug)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub n_registers: usize,
    pub n_cursors: usize,
    pub param_count: usize,
    pub source_sql: String,
}

impl Program {
    pub fn new(
        instructions: Vec<Instruction>,
        n_registers: usize,
        n_cursors: usize,
        param_count: usize,
        source_sql: String,
    ) -> Result<Program, ProgramError> {
        let p = Program {
            instructions,
            n_registers,
            n_cursors,
            param_count,
            source_sql,
        };
        p.validate()?;
        Ok(p)
    }

    /// Check the static operand table: jump targets in bounds, register and
    /// cursor indices below the declared counts, p4 kinds legal per opcode,
    /// instruction 0 is `Init`.
    pub fn validate(&self) -> Result<(), ProgramError> {
        if self.instructions.is_empty() || self.instructions[0].opcode != Opcode::Init {
            return Err(ProgramError("instruction 0 must be Init".into()));
        }
        let len = self.instructions.len() as i32;
        for (pc, inst) in self.instructions.iter().enumerate() {
            let err = |m: String| Err(ProgramError(format!("pc {pc} {}: {m}", inst.opcode.name())));
            if inst.opcode.p2_is_jump() && !(0..len).contains(&inst.p2) {
                return err(format!("jump target {} out of bounds", inst.p2));
            }
            if inst.opcode.p1_is_cursor() && !(0..self.n_cursors as i32).contains(&inst.p1) {
                return err(format!("cursor {} out of range", inst.p1));
            }
            let reg_ok = |r: i32| (0..self.n_registers as i32).contains(&r);
            let mut check_regs: Vec<i32> = Vec::new();
            match inst.opcode {
                Opcode::Column => check_regs.push(inst.p3),
                Opcode::RealAffinity | Opcode::IfPos | Opcode::NotNull | Opcode::IsNull => {
                    check_regs.push(inst.p1)
                }
                Opcode::ResultRow => {
                    check_regs.push(inst.p1);
                    check_regs.push(inst.p1 + inst.p2 - 1);
                }
                Opcode::Integer
                | Opcode::Real
                | Opcode::String
                | Opcode::Null
                | Opcode::Variable
                | Opcode::NewRowid => check_regs.push(inst.p2),
                Opcode::Add | Opcode::Sub | Opcode::Mul => {
                    check_regs.extend([inst.p1, inst.p2, inst.p3])
                }
                Opcode::Eq | Opcode::Ne | Opcode::Lt | Opcode::Le | Opcode::Gt | Opcode::Ge => {
                    check_regs.extend([inst.p1, inst.p3])
                }
                Opcode::MakeRecord => {
                    check_regs.push(inst.p1);
                    check_regs.push(inst.p3);
                    if let P4::Arity(n) = inst.p4 {
                        check_regs.push(inst.p1 + n as i32 - 1);
                    }
                }
                Opcode::Insert => {
                    check_regs.push(inst.p2);
                    check_regs.push(inst.p3);
                }
                Opcode::Gosub => check_regs.push(inst.p1),
                Opcode::Return => check_regs.push(inst.p1),
                Opcode::Function => {
                    check_regs.push(inst.p3);
                    if let P4::Func { n_args, .. } = &inst.p4 {
                        if *n_args > 0 {
                            check_regs.push(inst.p2);
                            check_regs.push(inst.p2 + *n_args as i32 - 1);
                        }
                    }
                }
                Opcode::AggStep => {
                    check_regs.push(inst.p3);
                    if let P4::Func { n_args, .. } = &inst.p4 {
                        if *n_args > 0 {
                            check_regs.push(inst.p2);
                            check_regs.push(inst.p2 + *n_args as i32 - 1);
                        }
                    }
                }
                Opcode::AggFinal => {
                    check_regs.push(inst.p1);
                    check_regs.push(inst.p3);
                }
                _ => {}
            }
            for r in check_regs {
                if !reg_ok(r) {
                    return err(format!("register {r} out of range"));
                }
            }
            let p4_ok = match inst.opcode {
                Opcode::OpenRead | Opcode::OpenWrite | Opcode::TableLock => {
                    matches!(inst.p4, P4::Text(_))
                }
                Opcode::MakeRecord => matches!(inst.p4, P4::Arity(_)),
                Opcode::Function | Opcode::AggStep | Opcode::AggFinal => {
                    matches!(inst.p4, P4::Func { .. })
                }
                Opcode::Integer => matches!(inst.p4, P4::None | P4::Int64(_)),
                Opcode::Real => matches!(inst.p4, P4::Float64(_)),
                Opcode::String => matches!(inst.p4, P4::Text(_)),
                _ => matches!(inst.p4, P4::None),
            };
            if !p4_ok {
                return err(format!("illegal p4 operand {:?}", inst.p4));
            }
        }
        Ok(())
    }
}

/// Render a program one instruction per line: `pc|Opcode|p1|p2|p3|p4|p5|`
/// with a two-digit p5 and trailing separator.
pub fn explain(program: &Program) -> String {
    let mut out = String::new();
    for (pc, inst) in program.instructions.iter().enumerate() {
        out.push_str(&format!(
            "{pc}|{}|{}|{}|{}|{}|{:02}|\n",
            inst.opcode.name(),
            inst.p1,
            inst.p2,
            inst.p3,
            inst.p4.render(),
            inst.p5
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opcode_names_round_trip() {
        for op in ALL_OPCODES {
            assert_eq!(Opcode::from_name(op.name()), Some(op));
        }
        assert_eq!(Opcode::from_name("Frobnicate"), None);
    }

    #[test]
    fn empty_program_rejected() {
        let err = Program::new(vec![], 1, 0, 0, String::new()).unwrap_err();
        assert!(err.0.contains("Init"));
    }

    #[test]
    fn jump_bounds_checked() {
        let instrs = vec![
            Instruction::new(Opcode::Init, 0, 99, 0),
            Instruction::new(Opcode::Halt, 0, 0, 0),
        ];
        assert!(Program::new(instrs, 1, 0, 0, String::new()).is_err());
    }

    #[test]
    fn register_bounds_checked() {
        let instrs = vec![
            Instruction::new(Opcode::Init, 0, 1, 0),
            Instruction::new(Opcode::Integer, 7, 5, 0),
            Instruction::new(Opcode::Halt, 0, 0, 0),
        ];
        assert!(Program::new(instrs, 2, 0, 0, String::new()).is_err());
    }

    #[test]
    fn explain_empty_is_empty() {
        let p = Program {
            instructions: vec![],
            n_registers: 0,
            n_cursors: 0,
            param_count: 0,
            source_sql: String::new(),
        };
        assert_eq!(explain(&p), "");
    }
}
