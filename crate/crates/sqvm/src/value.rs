//! The dynamically-typed SQL value cell.
//!
//! A [`ValueCell`] mirrors SQLite's `Mem` struct: a `flags` bitmask records
//! which of the payload fields currently hold a meaningful value. A cell can
//! carry more than one run-time type at once (an integer with a cached text
//! rendering keeps both `FLAG_INT` and `FLAG_STR` set so repeated casts are
//! free). `FLAG_NULL` is never combined with any other flag.

use std::fmt;

/// Value is SQL NULL.
pub const FLAG_NULL: u16 = 0x0001;
/// Value has a UTF-8 text payload.
pub const FLAG_STR: u16 = 0x0002;
/// Value has a signed 64-bit integer payload.
pub const FLAG_INT: u16 = 0x0004;
/// Value has a 64-bit float payload.
pub const FLAG_REAL: u16 = 0x0008;

/// Internal: cell holds a packed record produced by `MakeRecord`.
/// Not part of the SQL-visible type lattice.
pub(crate) const FLAG_RECORD: u16 = 0x0010;

/// Status code for a successful column read.
pub const RC_OK: u32 = 0;

/// A dynamically-typed SQL value with a flags bitmask.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueCell {
    flags: u16,
    int_val: i64,
    real_val: f64,
    str_val: Option<String>,
    record: Option<Box<[ValueCell]>>,
}

/// Arithmetic operations subject to overflow-to-real switching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArithKind {
    Add,
    Sub,
    Mul,
}

impl ValueCell {
    pub fn null() -> Self {
        ValueCell {
            flags: FLAG_NULL,
            int_val: 0,
            real_val: 0.0,
            str_val: None,
            record: None,
        }
    }

    pub fn int(v: i64) -> Self {
        ValueCell {
            flags: FLAG_INT,
            int_val: v,
            real_val: 0.0,
            str_val: None,
            record: None,
        }
    }

    pub fn real(v: f64) -> Self {
        ValueCell {
            flags: FLAG_REAL,
            int_val: 0,
            real_val: v,
            str_val: None,
            record: None,
        }
    }

    pub fn text(s: impl Into<String>) -> Self {
        ValueCell {
            flags: FLAG_STR,
            int_val: 0,
            real_val: 0.0,
            str_val: Some(s.into()),
            record: None,
        }
    }

    pub(crate) fn record(cells: Vec<ValueCell>) -> Self {
        ValueCell {
            flags: FLAG_RECORD,
            int_val: 0,
            real_val: 0.0,
            str_val: None,
            record: Some(cells.into_boxed_slice()),
        }
    }

    pub fn flags(&self) -> u16 {
        self.flags
    }

    pub fn is_null(&self) -> bool {
        self.flags & FLAG_NULL != 0
    }

    pub fn is_int(&self) -> bool {
        self.flags & FLAG_INT != 0
    }

    pub fn is_real(&self) -> bool {
        self.flags & FLAG_REAL != 0
    }

    pub fn is_str(&self) -> bool {
        self.flags & FLAG_STR != 0
    }

    /// Integer payload; meaningful only when `FLAG_INT` is set.
    pub fn as_int(&self) -> i64 {
        self.int_val
    }

    /// Float payload; meaningful only when `FLAG_REAL` is set.
    pub fn as_real(&self) -> f64 {
        self.real_val
    }

    /// Text payload; present only when `FLAG_STR` is set.
    pub fn as_str(&self) -> Option<&str> {
        self.str_val.as_deref()
    }

    pub(crate) fn record_cells(&self) -> Option<&[ValueCell]> {
        self.record.as_deref()
    }

    /// Numeric view of the cell as a float, used by comparisons and by the
    /// overflowed arithmetic path. Integers convert; reals pass through.
    pub fn numeric_as_real(&self) -> f64 {
        if self.is_real() {
            self.real_val
        } else {
            self.int_val as f64
        }
    }

    /// Reduce the cell to a single storage class for record packing and table
    /// storage. A dual-typed cell (cached cast) keeps its numeric identity:
    /// INT wins over REAL wins over STR.
    pub(crate) fn canonical_for_storage(&self) -> ValueCell {
        if self.is_null() {
            ValueCell::null()
        } else if self.is_int() {
            ValueCell::int(self.int_val)
        } else if self.is_real() {
            ValueCell::real(self.real_val)
        } else if self.is_str() {
            ValueCell::text(self.str_val.clone().unwrap_or_default())
        } else {
            // record cells are never stored as-is; callers unpack them
            self.clone()
        }
    }

    /// Approximate in-memory payload size in bytes, used for the record size
    /// cap check.
    pub(crate) fn payload_size(&self) -> u64 {
        let mut n = 16u64;
        if let Some(s) = &self.str_val {
            n += s.len() as u64;
        }
        if let Some(cells) = &self.record {
            n += cells.iter().map(ValueCell::payload_size).sum::<u64>();
        }
        n
    }

    /// SQL rendering used by the CLI: `NULL` for nulls, decimal for numbers,
    /// raw text otherwise.
    pub fn render_sql(&self) -> String {
        if self.is_null() {
            "NULL".to_string()
        } else if self.is_int() {
            self.int_val.to_string()
        } else if self.is_real() {
            render_real(self.real_val)
        } else if let Some(s) = &self.str_val {
            s.clone()
        } else {
            "<record>".to_string()
        }
    }
}

impl fmt::Display for ValueCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_sql())
    }
}

/// Shortest round-tripping decimal for a real, forced to contain a decimal
/// point or exponent so the rendering is distinguishable from an integer.
fn render_real(v: f64) -> String {
    let s = format!("{v}");
    if s.contains('.')
        || s.contains('e')
        || s.contains('E')
        || s.contains("inf")
        || s.contains("NaN")
    {
        s
    } else {
        format!("{s}.0")
    }
}

/// REAL column affinity applied on read: an integer cell is cast to a float,
/// anything else passes through unchanged.
pub fn apply_real_affinity(cell: &ValueCell) -> ValueCell {
    if cell.is_int() && !cell.is_real() {
        let mut out = cell.clone();
        out.real_val = out.int_val as f64;
        out.flags = (out.flags & !FLAG_INT) | FLAG_REAL;
        out.int_val = 0;
        out
    } else {
        cell.clone()
    }
}

/// Overflow-aware arithmetic. Integer results that overflow 64 bits switch to
/// a floating point representation, computed by converting both operands to
/// floats first. Any real operand forces a float result. Callers handle nulls.
pub fn arith_with_overflow(kind: ArithKind, a: &ValueCell, b: &ValueCell) -> ValueCell {
    debug_assert!(a.is_int() || a.is_real());
    debug_assert!(b.is_int() || b.is_real());
    if a.is_int() && !a.is_real() && b.is_int() && !b.is_real() {
        let (x, y) = (a.int_val, b.int_val);
        let checked = match kind {
            ArithKind::Add => x.checked_add(y),
            ArithKind::Sub => x.checked_sub(y),
            ArithKind::Mul => x.checked_mul(y),
        };
        if let Some(v) = checked {
            return ValueCell::int(v);
        }
    }
    let (x, y) = (a.numeric_as_real(), b.numeric_as_real());
    let v = match kind {
        ArithKind::Add => x + y,
        ArithKind::Sub => x - y,
        ArithKind::Mul => x * y,
    };
    ValueCell::real(v)
}

/// Cache a text rendering on a numeric cell. The numeric flag is retained and
/// `FLAG_STR` added so subsequent casts have zero cost. Idempotent.
pub fn cast_to_text_cached(cell: &ValueCell) -> ValueCell {
    debug_assert!(cell.is_int() || cell.is_real());
    if cell.is_str() {
        return cell.clone();
    }
    let mut out = cell.clone();
    out.str_val = Some(if out.is_int() && !out.is_real() {
        out.int_val.to_string()
    } else {
        render_real(out.real_val)
    });
    out.flags |= FLAG_STR;
    out
}

/// Three-way comparison with SQL ordering: NULL compares with nothing
/// (`None`), numerics compare numerically (in float when mixed), numeric
/// sorts before text, text compares bytewise.
pub fn compare_cells(a: &ValueCell, b: &ValueCell) -> Option<std::cmp::Ordering> {
    use std::cmp::Ordering;
    if a.is_null() || b.is_null() {
        return None;
    }
    let a_num = a.is_int() || a.is_real();
    let b_num = b.is_int() || b.is_real();
    Some(match (a_num, b_num) {
        (true, true) => {
            if a.is_int() && !a.is_real() && b.is_int() && !b.is_real() {
                a.as_int().cmp(&b.as_int())
            } else {
                a.numeric_as_real()
                    .partial_cmp(&b.numeric_as_real())
                    .unwrap_or(Ordering::Equal)
            }
        }
        (true, false) => Ordering::Less,
        (false, true) => Ordering::Greater,
        (false, false) => a
            .as_str()
            .unwrap_or("")
            .as_bytes()
            .cmp(b.as_str().unwrap_or("").as_bytes()),
    })
}

/// Pack a column-read status code and the destination register's flags into
/// one number: `(flags << 16) | rc`.
pub fn encode_column_result(rc: u32, flags: u16) -> u32 {
    debug_assert!(rc < 65536);
    ((flags as u32) << 16) | rc
}

/// Inverse of [`encode_column_result`].
pub fn decode_column_result(encoded: u32) -> (u32, u16) {
    (encoded & 0xFFFF, (encoded >> 16) as u16)
}
