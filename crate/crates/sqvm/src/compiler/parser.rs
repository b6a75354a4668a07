//! Tokenizer and recursive-descent parser for the accepted SQL subset.
//!
//! Grammar (EBNF mirror lives in `docs/grammar.ebnf`):
//!
//! ```text
//! statement   = create-table | insert | select ;
//! create-table= CREATE TABLE ident "(" column { "," column } ")" ;
//! column      = ident affinity ;
//! affinity    = INTEGER | REAL | TEXT | NONE ;
//! insert      = INSERT INTO ident VALUES "(" value { "," value } ")" ;
//! value       = literal | "?" ;
//! select      = SELECT item { "," item } FROM ident { join } [ WHERE conj ] ;
//! item        = colref | ident "(" [ "*" | arg { "," arg } ] ")" ;
//! arg         = colref | literal ;
//! join        = JOIN ident ON colref "=" colref ;
//! conj        = comparison { AND comparison } ;
//! comparison  = operand cmp operand ;
//! cmp         = "=" | "!=" | "<>" | "<" | "<=" | ">" | ">=" ;
//! operand     = colref | literal | "?" ;
//! colref      = ident [ "." ident ] ;
//! ```

use std::fmt;

use crate::storage::Affinity;

/// Parse failure with the byte offset and what was expected there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntaxError {
    pub offset: usize,
    pub expected: String,
}

impl fmt::Display for SyntaxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "syntax error at offset {}: expected {}",
            self.offset, self.expected
        )
    }
}

impl std::error::Error for SyntaxError {}

#[derive(Debug, Clone, PartialEq)]
pub enum Literal {
    Null,
    Int(i64),
    Real(f64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRef {
    pub table: Option<String>,
    pub column: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operand {
    Column(ColumnRef),
    Literal(Literal),
    /// 1-based positional parameter.
    Param(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub left: Operand,
    pub op: CmpOp,
    pub right: Operand,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectItem {
    Column(ColumnRef),
    /// Function or aggregate call; which one is resolved at codegen time.
    Call {
        name: String,
        args: Vec<CallArg>,
        star: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CallArg {
    Column(ColumnRef),
    Literal(Literal),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Join {
    pub table: String,
    pub left: ColumnRef,
    pub right: ColumnRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectStmt {
    pub items: Vec<SelectItem>,
    pub from: String,
    pub joins: Vec<Join>,
    pub predicates: Vec<Comparison>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InsertValue {
    Literal(Literal),
    Param(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ast {
    CreateTable {
        name: String,
        columns: Vec<(String, Affinity)>,
    },
    Insert {
        table: String,
        values: Vec<InsertValue>,
    },
    Select(SelectStmt),
}

impl Ast {
    pub fn param_count(&self) -> usize {
        match self {
            Ast::CreateTable { .. } => 0,
            Ast::Insert { values, .. } => values
                .iter()
                .filter(|v| matches!(v, InsertValue::Param(_)))
                .count(),
            Ast::Select(s) => s
                .predicates
                .iter()
                .flat_map(|c| [&c.left, &c.right])
                .filter(|o| matches!(o, Operand::Param(_)))
                .count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Real(f64),
    Str(String),
    LParen,
    RParen,
    Comma,
    Dot,
    Star,
    Question,
    Minus,
    Cmp(CmpOp),
    Semi,
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(usize, Tok)>,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, SyntaxError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0usize;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        match c {
            '(' => {
                toks.push((start, Tok::LParen));
                i += 1;
            }
            ')' => {
                toks.push((start, Tok::RParen));
                i += 1;
            }
            ',' => {
                toks.push((start, Tok::Comma));
                i += 1;
            }
            '.' => {
                toks.push((start, Tok::Dot));
                i += 1;
            }
            '*' => {
                toks.push((start, Tok::Star));
                i += 1;
            }
            '?' => {
                toks.push((start, Tok::Question));
                i += 1;
            }
            ';' => {
                toks.push((start, Tok::Semi));
                i += 1;
            }
            '-' => {
                toks.push((start, Tok::Minus));
                i += 1;
            }
            '=' => {
                toks.push((start, Tok::Cmp(CmpOp::Eq)));
                i += 1;
            }
            '!' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((start, Tok::Cmp(CmpOp::Ne)));
                    i += 2;
                } else {
                    return Err(SyntaxError {
                        offset: start,
                        expected: "'=' after '!'".into(),
                    });
                }
            }
            '<' => match bytes.get(i + 1) {
                Some(b'=') => {
                    toks.push((start, Tok::Cmp(CmpOp::Le)));
                    i += 2;
                }
                Some(b'>') => {
                    toks.push((start, Tok::Cmp(CmpOp::Ne)));
                    i += 2;
                }
                _ => {
                    toks.push((start, Tok::Cmp(CmpOp::Lt)));
                    i += 1;
                }
            },
            '>' => {
                if bytes.get(i + 1) == Some(&b'=') {
                    toks.push((start, Tok::Cmp(CmpOp::Ge)));
                    i += 2;
                } else {
                    toks.push((start, Tok::Cmp(CmpOp::Gt)));
                    i += 1;
                }
            }
            '\'' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match bytes.get(i) {
                        None => {
                            return Err(SyntaxError {
                                offset: start,
                                expected: "closing quote".into(),
                            })
                        }
                        Some(b'\'') => {
                            if bytes.get(i + 1) == Some(&b'\'') {
                                s.push('\'');
                                i += 2;
                            } else {
                                i += 1;
                                break;
                            }
                        }
                        Some(_) => {
                            let ch_start = i;
                            while i < bytes.len() && bytes[i] != b'\'' {
                                i += 1;
                            }
                            s.push_str(&src[ch_start..i]);
                        }
                    }
                }
                toks.push((start, Tok::Str(s)));
            }
            '0'..='9' => {
                let mut j = i;
                let mut is_real = false;
                while j < bytes.len() && bytes[j].is_ascii_digit() {
                    j += 1;
                }
                if j < bytes.len()
                    && bytes[j] == b'.'
                    && bytes.get(j + 1).is_some_and(|b| b.is_ascii_digit())
                {
                    is_real = true;
                    j += 1;
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                }
                if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                    let mut k = j + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        is_real = true;
                        j = k;
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                    }
                }
                let text = &src[i..j];
                if is_real {
                    let v = text.parse::<f64>().map_err(|_| SyntaxError {
                        offset: start,
                        expected: "a numeric literal".into(),
                    })?;
                    toks.push((start, Tok::Real(v)));
                } else if let Ok(v) = text.parse::<i64>() {
                    toks.push((start, Tok::Int(v)));
                } else {
                    // too large for i64: SQLite reads it as a real
                    let v = text.parse::<f64>().map_err(|_| SyntaxError {
                        offset: start,
                        expected: "a numeric literal".into(),
                    })?;
                    toks.push((start, Tok::Real(v)));
                }
                i = j;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let mut j = i;
                while j < bytes.len()
                    && ((bytes[j] as char).is_ascii_alphanumeric() || bytes[j] == b'_')
                {
                    j += 1;
                }
                toks.push((start, Tok::Ident(src[i..j].to_string())));
                i = j;
            }
            _ => {
                return Err(SyntaxError {
                    offset: start,
                    expected: "a token".into(),
                });
            }
        }
    }
    Ok(toks)
}

struct Parser<'a> {
    lexer: Lexer<'a>,
    pos: usize,
    params: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.lexer.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.lexer
            .toks
            .get(self.pos)
            .map(|(o, _)| *o)
            .unwrap_or(self.lexer.src.len())
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.lexer.toks.get(self.pos).map(|(_, t)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn err(&self, expected: impl Into<String>) -> SyntaxError {
        SyntaxError {
            offset: self.offset(),
            expected: expected.into(),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), SyntaxError> {
        match self.peek() {
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw) => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err(format!("keyword {kw}"))),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn ident(&mut self, what: &str) -> Result<String, SyntaxError> {
        match self.peek() {
            Some(Tok::Ident(s)) => {
                let s = s.clone();
                self.pos += 1;
                Ok(s)
            }
            _ => Err(self.err(what.to_string())),
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), SyntaxError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(what.to_string()))
        }
    }

    fn literal(&mut self) -> Result<Literal, SyntaxError> {
        let neg = if self.peek() == Some(&Tok::Minus) {
            self.pos += 1;
            true
        } else {
            false
        };
        match self.bump() {
            Some(Tok::Int(v)) => Ok(Literal::Int(if neg { -v } else { v })),
            Some(Tok::Real(v)) => Ok(Literal::Real(if neg { -v } else { v })),
            Some(Tok::Str(s)) if !neg => Ok(Literal::Text(s)),
            Some(Tok::Ident(s)) if !neg && s.eq_ignore_ascii_case("null") => Ok(Literal::Null),
            _ => {
                self.pos = self.pos.saturating_sub(1);
                Err(self.err("a literal"))
            }
        }
    }

    fn colref(&mut self) -> Result<ColumnRef, SyntaxError> {
        let first = self.ident("a column name")?;
        if self.peek() == Some(&Tok::Dot) {
            self.pos += 1;
            let col = self.ident("a column name after '.'")?;
            Ok(ColumnRef {
                table: Some(first),
                column: col,
            })
        } else {
            Ok(ColumnRef {
                table: None,
                column: first,
            })
        }
    }

    fn operand(&mut self) -> Result<Operand, SyntaxError> {
        match self.peek() {
            Some(Tok::Question) => {
                self.pos += 1;
                self.params += 1;
                Ok(Operand::Param(self.params))
            }
            Some(Tok::Int(_)) | Some(Tok::Real(_)) | Some(Tok::Str(_)) | Some(Tok::Minus) => {
                Ok(Operand::Literal(self.literal()?))
            }
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("null") => {
                Ok(Operand::Literal(self.literal()?))
            }
            Some(Tok::Ident(_)) => Ok(Operand::Column(self.colref()?)),
            _ => Err(self.err("a column, literal, or '?'")),
        }
    }

    fn comparison(&mut self) -> Result<Comparison, SyntaxError> {
        let left = self.operand()?;
        let op = match self.bump() {
            Some(Tok::Cmp(op)) => op,
            _ => {
                self.pos = self.pos.saturating_sub(1);
                return Err(self.err("a comparison operator"));
            }
        };
        let right = self.operand()?;
        Ok(Comparison { left, op, right })
    }

    fn select_item(&mut self) -> Result<SelectItem, SyntaxError> {
        let name = self.ident("a column or function name")?;
        if self.peek() == Some(&Tok::LParen) {
            self.pos += 1;
            let mut args = Vec::new();
            let mut star = false;
            if self.peek() == Some(&Tok::Star) {
                self.pos += 1;
                star = true;
            } else if self.peek() != Some(&Tok::RParen) {
                loop {
                    match self.peek() {
                        Some(Tok::Ident(s)) if !s.eq_ignore_ascii_case("null") => {
                            args.push(CallArg::Column(self.colref()?))
                        }
                        _ => args.push(CallArg::Literal(self.literal()?)),
                    }
                    if self.peek() == Some(&Tok::Comma) {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
            }
            self.expect(Tok::RParen, "')'")?;
            Ok(SelectItem::Call { name, args, star })
        } else if self.peek() == Some(&Tok::Dot) {
            self.pos += 1;
            let col = self.ident("a column name after '.'")?;
            Ok(SelectItem::Column(ColumnRef {
                table: Some(name),
                column: col,
            }))
        } else {
            Ok(SelectItem::Column(ColumnRef {
                table: None,
                column: name,
            }))
        }
    }

    fn select(&mut self) -> Result<Ast, SyntaxError> {
        self.keyword("SELECT")?;
        let mut items = vec![self.select_item()?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            items.push(self.select_item()?);
        }
        self.keyword("FROM")?;
        let from = self.ident("a table name")?;
        let mut joins = Vec::new();
        while self.at_keyword("JOIN") {
            self.pos += 1;
            let table = self.ident("a table name")?;
            self.keyword("ON")?;
            let left = self.colref()?;
            match self.bump() {
                Some(Tok::Cmp(CmpOp::Eq)) => {}
                _ => {
                    self.pos = self.pos.saturating_sub(1);
                    return Err(self.err("'=' in join condition"));
                }
            }
            let right = self.colref()?;
            joins.push(Join { table, left, right });
        }
        let mut predicates = Vec::new();
        if self.at_keyword("WHERE") {
            self.pos += 1;
            predicates.push(self.comparison()?);
            while self.at_keyword("AND") {
                self.pos += 1;
                predicates.push(self.comparison()?);
            }
        }
        Ok(Ast::Select(SelectStmt {
            items,
            from,
            joins,
            predicates,
        }))
    }

    fn create_table(&mut self) -> Result<Ast, SyntaxError> {
        self.keyword("CREATE")?;
        self.keyword("TABLE")?;
        let name = self.ident("a table name")?;
        self.expect(Tok::LParen, "'('")?;
        let mut columns = Vec::new();
        loop {
            let col = self.ident("a column name")?;
            let aff_off = self.offset();
            let aff_name = self.ident("a column affinity")?;
            let affinity = Affinity::parse(&aff_name).ok_or(SyntaxError {
                offset: aff_off,
                expected: "one of INTEGER, REAL, TEXT, NONE".into(),
            })?;
            columns.push((col, affinity));
            if self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.expect(Tok::RParen, "')'")?;
        Ok(Ast::CreateTable { name, columns })
    }

    fn insert(&mut self) -> Result<Ast, SyntaxError> {
        self.keyword("INSERT")?;
        self.keyword("INTO")?;
        let table = self.ident("a table name")?;
        self.keyword("VALUES")?;
        self.expect(Tok::LParen, "'('")?;
        let mut values = Vec::new();
        loop {
            if self.peek() == Some(&Tok::Question) {
                self.pos += 1;
                self.params += 1;
                values.push(InsertValue::Param(self.params));
            } else {
                values.push(InsertValue::Literal(self.literal()?));
            }
            if self.peek() == Some(&Tok::Comma) {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.expect(Tok::RParen, "')'")?;
        Ok(Ast::Insert { table, values })
    }
}

/// Parse one SQL statement from the accepted grammar.
pub fn parse(sql: &str) -> Result<Ast, SyntaxError> {
    let toks = lex(sql)?;
    let mut p = Parser {
        lexer: Lexer { src: sql, toks },
        pos: 0,
        params: 0,
    };
    let ast = if p.at_keyword("SELECT") {
        p.select()?
    } else if p.at_keyword("CREATE") {
        p.create_table()?
    } else if p.at_keyword("INSERT") {
        p.insert()?
    } else {
        return Err(SyntaxError {
            offset: p.offset(),
            expected: "SELECT, CREATE TABLE, or INSERT".into(),
        });
    };
    if p.peek() == Some(&Tok::Semi) {
        p.pos += 1;
    }
    if p.peek().is_some() {
        return Err(p.err("end of statement"));
    }
    Ok(ast)
}
