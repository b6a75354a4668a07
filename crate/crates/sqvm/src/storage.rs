//! In-memory tables with cursors and a JSON document file format.
//!
//! The storage layer is an append-ordered row list per table, a deliberate
//! stand-in for a real B-tree backend: every behavior the interpreter's
//! cursor opcodes observe (rewind/next/column in insertion order) is
//! preserved. Writes are rejected while any READ cursor is open on the same
//! table, which keeps iteration order stable without iterator-invalidation
//! machinery.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use crate::value::{encode_column_result, ValueCell, RC_OK};

/// Column type affinity. REAL-affinity columns get a `RealAffinity` opcode
/// after every `Column` read; the others carry no read-time conversion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Affinity {
    Integer,
    Real,
    Text,
    None,
}

impl Affinity {
    pub fn name(self) -> &'static str {
        match self {
            Affinity::Integer => "INTEGER",
            Affinity::Real => "REAL",
            Affinity::Text => "TEXT",
            Affinity::None => "NONE",
        }
    }

    pub fn parse(s: &str) -> Option<Affinity> {
        match s.to_ascii_uppercase().as_str() {
            "INTEGER" | "INT" => Some(Affinity::Integer),
            "REAL" | "FLOAT" | "DOUBLE" => Some(Affinity::Real),
            "TEXT" => Some(Affinity::Text),
            "NONE" => Some(Affinity::None),
            _ => None,
        }
    }
}

impl fmt::Display for Affinity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnSchema {
    pub name: String,
    pub affinity: Affinity,
}

impl ColumnSchema {
    pub fn new(name: impl Into<String>, affinity: Affinity) -> Self {
        ColumnSchema {
            name: name.into(),
            affinity,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub schema: Vec<ColumnSchema>,
    pub rows: Vec<Vec<ValueCell>>,
    pub next_rowid: i64,
}

impl Table {
    /// Column index for a name, case-insensitive.
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema
            .iter()
            .position(|c| c.name.eq_ignore_ascii_case(name))
    }
}

/// Storage-level errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StorageError {
    /// Malformed database document or CSV input.
    Format(String),
    /// Schema violation: duplicate table, arity mismatch, empty schema.
    Schema(String),
    /// API misuse: closed cursor, out-of-range column, wrong state.
    Usage(String),
    /// Write attempted while a READ cursor is open on the table.
    Locked(String),
    /// File I/O failure with path context.
    Io { path: String, message: String },
}

impl fmt::Display for StorageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StorageError::Format(m) => write!(f, "format error: {m}"),
            StorageError::Schema(m) => write!(f, "schema error: {m}"),
            StorageError::Usage(m) => write!(f, "usage error: {m}"),
            StorageError::Locked(t) => write!(f, "table '{t}' is locked by an open read cursor"),
            StorageError::Io { path, message } => write!(f, "io error on '{path}': {message}"),
        }
    }
}

impl std::error::Error for StorageError {}

/// A database: a case-insensitive map of named tables, optionally bound to a
/// file location.
#[derive(Debug, Default)]
pub struct Database {
    tables: BTreeMap<String, Table>,
    pub path: Option<PathBuf>,
    read_locks: HashMap<String, usize>,
}

impl PartialEq for Database {
    fn eq(&self, other: &Self) -> bool {
        self.tables == other.tables
    }
}

pub type SharedDb = Rc<RefCell<Database>>;

fn key_of(name: &str) -> String {
    name.to_ascii_lowercase()
}

impl Database {
    pub fn in_memory() -> Database {
        Database::default()
    }

    pub fn shared(self) -> SharedDb {
        Rc::new(RefCell::new(self))
    }

    /// Load a database document. A missing file yields an empty database
    /// bound to the path.
    pub fn open(path: impl AsRef<Path>) -> Result<Database, StorageError> {
        let path = path.as_ref();
        if !path.exists() {
            let mut db = Database::in_memory();
            db.path = Some(path.to_path_buf());
            return Ok(db);
        }
        let text = std::fs::read_to_string(path).map_err(|e| StorageError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut db = Database::from_document(&text)?;
        db.path = Some(path.to_path_buf());
        Ok(db)
    }

    /// Write the database document to `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StorageError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_document()).map_err(|e| StorageError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.values().map(|t| t.name.as_str())
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.get(&key_of(name))
    }

    pub fn has_table(&self, name: &str) -> bool {
        self.tables.contains_key(&key_of(name))
    }

    pub fn create_table(
        &mut self,
        name: &str,
        schema: Vec<ColumnSchema>,
    ) -> Result<(), StorageError> {
        if schema.is_empty() {
            return Err(StorageError::Schema(format!(
                "table '{name}' has an empty schema"
            )));
        }
        for (i, col) in schema.iter().enumerate() {
            if schema[..i]
                .iter()
                .any(|c| c.name.eq_ignore_ascii_case(&col.name))
            {
                return Err(StorageError::Schema(format!(
                    "duplicate column '{}' in table '{name}'",
                    col.name
                )));
            }
        }
        let k = key_of(name);
        if self.tables.contains_key(&k) {
            return Err(StorageError::Schema(format!(
                "table '{name}' already exists"
            )));
        }
        self.tables.insert(
            k,
            Table {
                name: name.to_string(),
                schema,
                rows: Vec::new(),
                next_rowid: 1,
            },
        );
        Ok(())
    }

    /// Append a row, returning the assigned rowid.
    pub fn insert_row(&mut self, table: &str, cells: Vec<ValueCell>) -> Result<i64, StorageError> {
        let k = key_of(table);
        if self.read_locks.get(&k).copied().unwrap_or(0) > 0 {
            return Err(StorageError::Locked(table.to_string()));
        }
        let t = self
            .tables
            .get_mut(&k)
            .ok_or_else(|| StorageError::Schema(format!("no such table '{table}'")))?;
        if cells.len() != t.schema.len() {
            return Err(StorageError::Schema(format!(
                "table '{table}' expects {} cells, got {}",
                t.schema.len(),
                cells.len()
            )));
        }
        let rowid = t.next_rowid;
        t.rows
            .push(cells.iter().map(ValueCell::canonical_for_storage).collect());
        t.next_rowid += 1;
        Ok(rowid)
    }

    /// Load CSV into `table`, creating it with `schema` if absent. Fields are
    /// parsed per column affinity; empty fields become NULL. Returns the
    /// number of rows loaded.
    pub fn load_csv(
        &mut self,
        table: &str,
        csv_path: impl AsRef<Path>,
        schema: Vec<ColumnSchema>,
        has_header: bool,
    ) -> Result<usize, StorageError> {
        let path = csv_path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| StorageError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        if !self.has_table(table) {
            self.create_table(table, schema.clone())?;
        }
        let arity = self.table(table).unwrap().schema.len();
        let affinities: Vec<Affinity> = self
            .table(table)
            .unwrap()
            .schema
            .iter()
            .map(|c| c.affinity)
            .collect();
        let records = parse_csv(&text)?;
        let mut loaded = 0;
        for (line_no, fields) in records {
            if has_header && loaded == 0 && line_no == 1 {
                continue;
            }
            if fields.len() != arity {
                return Err(StorageError::Format(format!(
                    "line {line_no}: expected {arity} fields, got {}",
                    fields.len()
                )));
            }
            let mut cells = Vec::with_capacity(arity);
            for (field, aff) in fields.iter().zip(&affinities) {
                cells.push(parse_field(field, *aff, line_no)?);
            }
            self.insert_row(table, cells)?;
            loaded += 1;
        }
        Ok(loaded)
    }

    fn acquire_read_lock(&mut self, key: &str) {
        *self.read_locks.entry(key.to_string()).or_insert(0) += 1;
    }

    fn release_read_lock(&mut self, key: &str) {
        if let Some(n) = self.read_locks.get_mut(key) {
            *n = n.saturating_sub(1);
        }
    }

    /// Render the versioned database document.
    pub fn to_document(&self) -> String {
        use serde_json::{json, Map, Value};
        let mut tables = Map::new();
        for t in self.tables.values() {
            let schema: Vec<Value> = t
                .schema
                .iter()
                .map(|c| json!({"name": c.name, "affinity": c.affinity.name()}))
                .collect();
            let rows: Vec<Value> = t
                .rows
                .iter()
                .map(|row| Value::Array(row.iter().map(cell_to_json).collect()))
                .collect();
            tables.insert(t.name.clone(), json!({"schema": schema, "rows": rows}));
        }
        let doc = json!({"format": 1, "tables": Value::Object(tables)});
        serde_json::to_string_pretty(&doc).expect("document serialization")
    }

    /// Parse a database document.
    pub fn from_document(text: &str) -> Result<Database, StorageError> {
        let doc: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| StorageError::Format(format!("invalid document: {e}")))?;
        let format = doc.get("format").and_then(|v| v.as_i64());
        if format != Some(1) {
            return Err(StorageError::Format(format!(
                "unsupported document format {format:?}"
            )));
        }
        let mut db = Database::in_memory();
        let tables = doc
            .get("tables")
            .and_then(|v| v.as_object())
            .ok_or_else(|| StorageError::Format("missing 'tables' object".into()))?;
        for (name, tv) in tables {
            let schema_v = tv
                .get("schema")
                .and_then(|v| v.as_array())
                .ok_or_else(|| StorageError::Format(format!("table '{name}': missing schema")))?;
            let mut schema = Vec::new();
            for col in schema_v {
                let cname = col.get("name").and_then(|v| v.as_str()).ok_or_else(|| {
                    StorageError::Format(format!("table '{name}': column without name"))
                })?;
                let aff = col
                    .get("affinity")
                    .and_then(|v| v.as_str())
                    .and_then(Affinity::parse)
                    .ok_or_else(|| {
                        StorageError::Format(format!("table '{name}': bad affinity for '{cname}'"))
                    })?;
                schema.push(ColumnSchema::new(cname, aff));
            }
            db.create_table(name, schema)
                .map_err(|e| StorageError::Format(format!("table '{name}': {e}")))?;
            let rows = tv
                .get("rows")
                .and_then(|v| v.as_array())
                .ok_or_else(|| StorageError::Format(format!("table '{name}': missing rows")))?;
            for (i, rv) in rows.iter().enumerate() {
                let arr = rv.as_array().ok_or_else(|| {
                    StorageError::Format(format!("table '{name}' row {i}: not an array"))
                })?;
                let arity = db.table(name).unwrap().schema.len();
                if arr.len() != arity {
                    return Err(StorageError::Format(format!(
                        "table '{name}' row {i}: expected {arity} cells, got {}",
                        arr.len()
                    )));
                }
                let mut cells = Vec::with_capacity(arr.len());
                for (j, cv) in arr.iter().enumerate() {
                    cells.push(cell_from_json(cv).ok_or_else(|| {
                        StorageError::Format(format!("table '{name}' row {i} cell {j}: bad cell"))
                    })?);
                }
                db.insert_row(name, cells)
                    .map_err(|e| StorageError::Format(format!("table '{name}' row {i}: {e}")))?;
            }
        }
        Ok(db)
    }
}

fn cell_to_json(cell: &ValueCell) -> serde_json::Value {
    use serde_json::json;
    if cell.is_null() {
        serde_json::Value::Null
    } else if cell.is_int() {
        json!({"i": cell.as_int()})
    } else if cell.is_real() {
        json!({"r": cell.as_real()})
    } else {
        json!({"s": cell.as_str().unwrap_or_default()})
    }
}

fn cell_from_json(v: &serde_json::Value) -> Option<ValueCell> {
    match v {
        serde_json::Value::Null => Some(ValueCell::null()),
        serde_json::Value::Object(m) => {
            if m.len() != 1 {
                return None;
            }
            if let Some(i) = m.get("i") {
                return i.as_i64().map(ValueCell::int);
            }
            if let Some(r) = m.get("r") {
                return r.as_f64().map(ValueCell::real);
            }
            if let Some(s) = m.get("s") {
                return s.as_str().map(ValueCell::text);
            }
            None
        }
        _ => None,
    }
}

fn parse_field(field: &str, affinity: Affinity, line_no: usize) -> Result<ValueCell, StorageError> {
    if field.is_empty() {
        return Ok(ValueCell::null());
    }
    match affinity {
        Affinity::Integer => field.parse::<i64>().map(ValueCell::int).map_err(|_| {
            StorageError::Format(format!("line {line_no}: '{field}' is not an integer"))
        }),
        Affinity::Real => field
            .parse::<f64>()
            .map(ValueCell::real)
            .map_err(|_| StorageError::Format(format!("line {line_no}: '{field}' is not a real"))),
        Affinity::Text => Ok(ValueCell::text(field)),
        Affinity::None => {
            if let Ok(i) = field.parse::<i64>() {
                Ok(ValueCell::int(i))
            } else if let Ok(r) = field.parse::<f64>() {
                Ok(ValueCell::real(r))
            } else {
                Ok(ValueCell::text(field))
            }
        }
    }
}

/// Minimal RFC-4180-style CSV reader: quoted fields, doubled-quote escapes,
/// UTF-8 text, LF or CRLF line endings. Returns (1-based line, fields) pairs.
fn parse_csv(text: &str) -> Result<Vec<(usize, Vec<String>)>, StorageError> {
    let mut records = Vec::new();
    let mut fields: Vec<String> = Vec::new();
    let mut field = String::new();
    let mut in_quotes = false;
    let mut line_no = 1usize;
    let mut record_line = 1usize;
    let mut chars = text.chars().peekable();
    let mut any = false;
    while let Some(c) = chars.next() {
        any = true;
        if in_quotes {
            match c {
                '"' => {
                    if chars.peek() == Some(&'"') {
                        chars.next();
                        field.push('"');
                    } else {
                        in_quotes = false;
                    }
                }
                '\n' => {
                    line_no += 1;
                    field.push(c);
                }
                _ => field.push(c),
            }
        } else {
            match c {
                '"' => {
                    if !field.is_empty() {
                        return Err(StorageError::Format(format!(
                            "line {line_no}: quote inside unquoted field"
                        )));
                    }
                    in_quotes = true;
                }
                ',' => {
                    fields.push(std::mem::take(&mut field));
                }
                '\r' => {}
                '\n' => {
                    fields.push(std::mem::take(&mut field));
                    if !(fields.len() == 1 && fields[0].is_empty()) {
                        records.push((record_line, std::mem::take(&mut fields)));
                    } else {
                        fields.clear();
                    }
                    line_no += 1;
                    record_line = line_no;
                }
                _ => field.push(c),
            }
        }
    }
    if in_quotes {
        return Err(StorageError::Format(format!(
            "line {record_line}: unterminated quote"
        )));
    }
    if any && (!field.is_empty() || !fields.is_empty()) {
        fields.push(field);
        records.push((record_line, fields));
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CursorMode {
    Read,
    Write,
}

/// Iteration state over one table. READ cursors hold a lock that rejects
/// concurrent writes to the same table; the lock is released on close or drop.
#[derive(Debug)]
pub struct Cursor {
    db: SharedDb,
    table_key: String,
    mode: CursorMode,
    /// Current row index; `None` is the AT_END state (also pre-rewind).
    pos: Option<usize>,
    open: bool,
}

impl Cursor {
    pub fn open_read(db: &SharedDb, table: &str) -> Result<Cursor, StorageError> {
        Self::open_with(db, table, CursorMode::Read)
    }

    pub fn open_write(db: &SharedDb, table: &str) -> Result<Cursor, StorageError> {
        Self::open_with(db, table, CursorMode::Write)
    }

    fn open_with(db: &SharedDb, table: &str, mode: CursorMode) -> Result<Cursor, StorageError> {
        let key = key_of(table);
        {
            let mut d = db.borrow_mut();
            if !d.tables.contains_key(&key) {
                return Err(StorageError::Schema(format!("no such table '{table}'")));
            }
            if mode == CursorMode::Read {
                d.acquire_read_lock(&key);
            }
        }
        Ok(Cursor {
            db: Rc::clone(db),
            table_key: key,
            mode,
            pos: None,
            open: true,
        })
    }

    pub fn mode(&self) -> CursorMode {
        self.mode
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    fn check_open(&self) -> Result<(), StorageError> {
        if self.open {
            Ok(())
        } else {
            Err(StorageError::Usage("cursor is closed".into()))
        }
    }

    fn row_count(&self) -> usize {
        self.db.borrow().tables[&self.table_key].rows.len()
    }

    /// Move to the first row. Returns `true` when the table is empty (the
    /// caller jumps past the loop).
    pub fn rewind(&mut self) -> Result<bool, StorageError> {
        self.check_open()?;
        if self.row_count() == 0 {
            self.pos = None;
            Ok(true)
        } else {
            self.pos = Some(0);
            Ok(false)
        }
    }

    /// Advance to the next row. Returns `false` exactly when AT_END is
    /// reached; further calls stay at AT_END.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<bool, StorageError> {
        self.check_open()?;
        match self.pos {
            None => Ok(false),
            Some(p) => {
                if p + 1 < self.row_count() {
                    self.pos = Some(p + 1);
                    Ok(true)
                } else {
                    self.pos = None;
                    Ok(false)
                }
            }
        }
    }

    /// Read one value from the current row, returning both the cell and the
    /// encoded `(rc, flags)` column result.
    pub fn column(&self, col_index: usize) -> Result<(ValueCell, u32), StorageError> {
        self.check_open()?;
        let p = self
            .pos
            .ok_or_else(|| StorageError::Usage("cursor is at end of table".into()))?;
        let d = self.db.borrow();
        let t = &d.tables[&self.table_key];
        if col_index >= t.schema.len() {
            return Err(StorageError::Usage(format!(
                "column index {col_index} out of range for '{}'",
                t.name
            )));
        }
        let cell = t.rows[p][col_index].clone();
        let encoded = encode_column_result(RC_OK, cell.flags());
        Ok((cell, encoded))
    }

    /// The rowid the next insert through this table will receive.
    pub fn peek_next_rowid(&self) -> Result<i64, StorageError> {
        self.check_open()?;
        Ok(self.db.borrow().tables[&self.table_key].next_rowid)
    }

    /// Append a row through a WRITE cursor.
    pub fn insert(&mut self, cells: Vec<ValueCell>) -> Result<i64, StorageError> {
        self.check_open()?;
        if self.mode != CursorMode::Write {
            return Err(StorageError::Usage("insert through a READ cursor".into()));
        }
        let name = self.db.borrow().tables[&self.table_key].name.clone();
        self.db.borrow_mut().insert_row(&name, cells)
    }

    pub fn close(&mut self) {
        if self.open {
            self.open = false;
            if self.mode == CursorMode::Read {
                self.db.borrow_mut().release_read_lock(&self.table_key);
            }
        }
    }
}

impl Drop for Cursor {
    fn drop(&mut self) {
        self.close();
    }
}

impl Clone for Cursor {
    fn clone(&self) -> Self {
        if self.open && self.mode == CursorMode::Read {
            self.db.borrow_mut().acquire_read_lock(&self.table_key);
        }
        Cursor {
            db: Rc::clone(&self.db),
            table_key: self.table_key.clone(),
            mode: self.mode,
            pos: self.pos,
            open: self.open,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{decode_column_result, FLAG_NULL};

    fn lineitem_schema() -> Vec<ColumnSchema> {
        vec![
            ColumnSchema::new("quantity", Affinity::Integer),
            ColumnSchema::new("extendedprice", Affinity::Real),
            ColumnSchema::new("discount", Affinity::Real),
        ]
    }

    #[test]
    fn create_and_insert() {
        let mut db = Database::in_memory();
        db.create_table("lineitem", lineitem_schema()).unwrap();
        assert_eq!(db.table("lineitem").unwrap().rows.len(), 0);
        let r1 = db
            .insert_row(
                "lineitem",
                vec![
                    ValueCell::int(5),
                    ValueCell::real(100.5),
                    ValueCell::real(0.04),
                ],
            )
            .unwrap();
        assert_eq!(r1, 1);
        let r2 = db
            .insert_row(
                "lineitem",
                vec![
                    ValueCell::int(6),
                    ValueCell::real(1.0),
                    ValueCell::real(0.0),
                ],
            )
            .unwrap();
        assert_eq!(r2, 2);
        let err = db
            .insert_row("lineitem", vec![ValueCell::int(1)])
            .unwrap_err();
        assert!(matches!(err, StorageError::Schema(_)));
    }

    #[test]
    fn duplicate_and_empty_schema_rejected() {
        let mut db = Database::in_memory();
        db.create_table("t", vec![ColumnSchema::new("a", Affinity::Integer)])
            .unwrap();
        assert!(matches!(
            db.create_table("T", vec![ColumnSchema::new("a", Affinity::Integer)]),
            Err(StorageError::Schema(_))
        ));
        assert!(matches!(
            db.create_table("u", vec![]),
            Err(StorageError::Schema(_))
        ));
    }

    #[test]
    fn cursor_iteration_and_encoding() {
        let mut db = Database::in_memory();
        db.create_table("lineitem", lineitem_schema()).unwrap();
        for i in 0..3 {
            db.insert_row(
                "lineitem",
                vec![
                    ValueCell::int(17 + i),
                    ValueCell::real(0.05),
                    ValueCell::null(),
                ],
            )
            .unwrap();
        }
        let shared = db.shared();
        let mut cur = Cursor::open_read(&shared, "lineitem").unwrap();
        assert!(!cur.rewind().unwrap());
        let (cell, enc) = cur.column(0).unwrap();
        assert_eq!(cell, ValueCell::int(17));
        assert_eq!(enc, 262144);
        let (_, enc_real) = cur.column(1).unwrap();
        assert_eq!(enc_real, 524288);
        let (_, enc_null) = cur.column(2).unwrap();
        assert_eq!(enc_null, 65536);
        assert_eq!(decode_column_result(enc_null), (0, FLAG_NULL));

        assert!(cur.next().unwrap());
        assert!(cur.next().unwrap());
        assert!(!cur.next().unwrap());
        // stays at end
        assert!(!cur.next().unwrap());
        assert!(matches!(cur.column(0), Err(StorageError::Usage(_))));

        // rewind restarts the identical sequence
        assert!(!cur.rewind().unwrap());
        assert_eq!(cur.column(0).unwrap().0, ValueCell::int(17));

        cur.close();
        assert!(matches!(cur.rewind(), Err(StorageError::Usage(_))));
    }

    #[test]
    fn rewind_empty_table() {
        let mut db = Database::in_memory();
        db.create_table("t", vec![ColumnSchema::new("a", Affinity::Integer)])
            .unwrap();
        let shared = db.shared();
        let mut cur = Cursor::open_read(&shared, "t").unwrap();
        assert!(cur.rewind().unwrap());
        assert!(!cur.next().unwrap());
    }

    #[test]
    fn writes_rejected_under_read_cursor() {
        let mut db = Database::in_memory();
        db.create_table("t", vec![ColumnSchema::new("a", Affinity::Integer)])
            .unwrap();
        let shared = db.shared();
        let cur = Cursor::open_read(&shared, "t").unwrap();
        let err = shared
            .borrow_mut()
            .insert_row("t", vec![ValueCell::int(1)])
            .unwrap_err();
        assert!(matches!(err, StorageError::Locked(_)));
        drop(cur);
        shared
            .borrow_mut()
            .insert_row("t", vec![ValueCell::int(1)])
            .unwrap();
    }

    #[test]
    fn save_open_round_trip() {
        let mut db = Database::in_memory();
        db.create_table(
            "t",
            vec![
                ColumnSchema::new("a", Affinity::Integer),
                ColumnSchema::new("b", Affinity::Real),
                ColumnSchema::new("c", Affinity::Text),
            ],
        )
        .unwrap();
        db.insert_row(
            "t",
            vec![ValueCell::int(1), ValueCell::real(2.5), ValueCell::null()],
        )
        .unwrap();
        db.insert_row(
            "t",
            vec![
                ValueCell::null(),
                ValueCell::real(-0.0),
                ValueCell::text("x,\"y\""),
            ],
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("sqvm-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round.db");
        db.save(&path).unwrap();
        let loaded = Database::open(&path).unwrap();
        assert_eq!(loaded, db);
        // flags survive exactly
        let orig = &db.table("t").unwrap().rows;
        let got = &loaded.table("t").unwrap().rows;
        for (a, b) in orig.iter().zip(got) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.flags(), y.flags());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn open_nonexistent_file_yields_empty() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("sqvm-missing-{}.db", std::process::id()));
        std::fs::remove_file(&path).ok();
        let db = Database::open(&path).unwrap();
        assert_eq!(db.table_names().count(), 0);
        assert_eq!(db.path.as_deref(), Some(path.as_path()));
    }

    #[test]
    fn malformed_document_names_offender() {
        let doc = r#"{"format":1,"tables":{"t":{"schema":[{"name":"a","affinity":"INTEGER"},{"name":"b","affinity":"REAL"}],"rows":[[{"i":1}]]}}}"#;
        let err = Database::from_document(doc).unwrap_err();
        match err {
            StorageError::Format(m) => {
                assert!(m.contains("'t'"), "message should name the table: {m}");
                assert!(m.contains("row 0"), "message should name the row: {m}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_loading() {
        let dir = std::env::temp_dir().join(format!("sqvm-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("in.csv");
        std::fs::write(&path, "5,100.5,0.04\n6,,\"a,\"\"b\"\"\"\n").unwrap();
        let mut db = Database::in_memory();
        let schema = vec![
            ColumnSchema::new("a", Affinity::Integer),
            ColumnSchema::new("b", Affinity::Real),
            ColumnSchema::new("c", Affinity::Text),
        ];
        let n = db.load_csv("t", &path, schema.clone(), false).unwrap();
        assert_eq!(n, 2);
        let t = db.table("t").unwrap();
        assert_eq!(
            t.rows[0],
            vec![
                ValueCell::int(5),
                ValueCell::real(100.5),
                ValueCell::text("0.04")
            ]
        );
        assert_eq!(t.rows[1][1], ValueCell::null());
        assert_eq!(t.rows[1][2], ValueCell::text("a,\"b\""));

        // header skipping
        std::fs::write(&path, "a,b,c\n1,2.0,x\n").unwrap();
        let mut db2 = Database::in_memory();
        assert_eq!(db2.load_csv("t", &path, schema.clone(), true).unwrap(), 1);

        // bad integer reports the line
        std::fs::write(&path, "1,1.0,x\nabc,2.0,y\n").unwrap();
        let mut db3 = Database::in_memory();
        let err = db3.load_csv("t", &path, schema, false).unwrap_err();
        match err {
            StorageError::Format(m) => assert!(m.contains("line 2"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn csv_none_affinity_infers_numeric_shapes() {
        let dir = std::env::temp_dir().join(format!("sqvm-none-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("in.csv");
        std::fs::write(&path, "1,x\n2.5,y\nword,z\n").unwrap();
        let mut db = Database::in_memory();
        let schema = vec![
            ColumnSchema::new("a", Affinity::None),
            ColumnSchema::new("b", Affinity::Text),
        ];
        db.load_csv("t", &path, schema, false).unwrap();
        let t = db.table("t").unwrap();
        assert_eq!(t.rows[0][0], ValueCell::int(1));
        assert_eq!(t.rows[1][0], ValueCell::real(2.5));
        assert_eq!(t.rows[2][0], ValueCell::text("word"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn save_to_readonly_location_errors() {
        let db = Database::in_memory();
        let err = db
            .save("/proc/sqvm-definitely-not-writable/x.db")
            .unwrap_err();
        assert!(matches!(err, StorageError::Io { .. }));
    }
}
