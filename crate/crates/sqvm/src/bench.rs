//! Micro-benchmark harness: seeded fixtures, the six suites, and
//! crossing/op instrumentation.
//!
//! Crossing accounting, pinned by the counting oracle in the acceptance
//! suite: opening a connection, registering a host function or aggregate,
//! each statement execute/run call (bound parameters ride along), each step
//! return, each explicit bind call, and each host-callback round trip count
//! one crossing each. Values are counted whenever a cell moves across:
//! parameters in, result-row cells out, callback arguments and accumulators
//! out, callback results in. The counters measure the logical boundary
//! protocol, so they are identical across execution modes; what the modes
//! change is how much work each crossing costs, which the op metrics track.

use std::collections::HashMap;
use std::rc::Rc;
use std::time::Instant;

use serde::Serialize;

use crate::hostapi::{
    AggFinalImpl, AggStepImpl, Connection, EngineError, FunctionImpl, ScriptedExpr,
};
use crate::storage::{Affinity, ColumnSchema, Database};
use crate::value::ValueCell;
use crate::vm::{ExecMode, Statement, StepStatus};

/// Host/engine boundary traffic counters, reset per benchmark run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CrossingCounters {
    pub crossings: u64,
    pub values_converted: u64,
}

/// Execution-work metrics, reset per benchmark run.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunMetrics {
    pub interp_ops: u64,
    pub read_flags_executed: u64,
    pub opaque_calls_executed: u64,
}

/// Deterministic 64-bit generator for fixtures (splitmix64).
#[derive(Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> SplitMix64 {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn next_range(&mut self, lo: i64, hi: i64) -> i64 {
        let span = (hi - lo + 1) as u64;
        lo + (self.next_u64() % span) as i64
    }

    /// Uniform float in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Order-sensitive FNV-1a 64 over emitted cells.
#[derive(Clone)]
pub struct ResultChecksum {
    hash: u64,
}

impl Default for ResultChecksum {
    fn default() -> Self {
        ResultChecksum {
            hash: 0xcbf29ce484222325,
        }
    }
}

impl ResultChecksum {
    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.hash ^= *b as u64;
            self.hash = self.hash.wrapping_mul(0x100000001b3);
        }
    }

    pub fn add_cell(&mut self, cell: &ValueCell) {
        if cell.is_null() {
            self.write(&[0]);
        } else if cell.is_int() {
            self.write(&[1]);
            self.write(&cell.as_int().to_le_bytes());
        } else if cell.is_real() {
            self.write(&[2]);
            self.write(&cell.as_real().to_bits().to_le_bytes());
        } else {
            let s = cell.as_str().unwrap_or("");
            self.write(&[3]);
            self.write(&(s.len() as u64).to_le_bytes());
            self.write(s.as_bytes());
        }
    }

    pub fn add_row(&mut self, row: &[ValueCell]) {
        for c in row {
            self.add_cell(c);
        }
        self.write(&[0xFF]);
    }

    pub fn value(&self) -> u64 {
        self.hash
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Select,
    InnerJoin,
    HostJoin,
    HostFunction,
    HostAggregate,
    FillTable,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Select,
        Suite::InnerJoin,
        Suite::HostJoin,
        Suite::HostFunction,
        Suite::HostAggregate,
        Suite::FillTable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Select => "select",
            Suite::InnerJoin => "innerjoin",
            Suite::HostJoin => "hostjoin",
            Suite::HostFunction => "hostfunction",
            Suite::HostAggregate => "hostaggregate",
            Suite::FillTable => "filltable",
        }
    }

    pub fn parse(s: &str) -> Option<Suite> {
        Suite::ALL.iter().copied().find(|x| x.name() == s)
    }
}

/// One benchmark run's instrumented results.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub bench_format: u32,
    pub benchmark: String,
    pub mode: String,
    pub rows: u64,
    pub crossings: u64,
    pub values_converted: u64,
    pub results_checksum: String,
    pub interp_opcount: u64,
    pub trace_opcount_unoptimized: u64,
    pub trace_opcount_optimized: u64,
    pub read_flags_executed: u64,
    pub opaque_calls_executed: u64,
    pub wall_seconds: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn to_text(&self) -> String {
        format!(
            "benchmark:            {}\n\
             mode:                 {}\n\
             rows:                 {}\n\
             crossings:            {}\n\
             values_converted:     {}\n\
             results_checksum:     {}\n\
             interp_opcount:       {}\n\
             trace_ops_unoptimized: {}\n\
             trace_ops_optimized:  {}\n\
             read_flags_executed:  {}\n\
             opaque_calls_executed: {}\n\
             wall_seconds:         {:.6}\n",
            self.benchmark,
            self.mode,
            self.rows,
            self.crossings,
            self.values_converted,
            self.results_checksum,
            self.interp_opcount,
            self.trace_opcount_unoptimized,
            self.trace_opcount_optimized,
            self.read_flags_executed,
            self.opaque_calls_executed,
            self.wall_seconds
        )
    }
}

/// Deterministic seeded fixture: `lineitem(quantity, extendedprice,
/// discount)`, `partsupp(PartKey, SuppKey)`, `part(PartKey, name)`, and
/// `supplier(SuppKey, name)`. `partsupp` has `rows` rows referencing
/// `rows/4` parts and `rows/10` suppliers (floored, minimum 1).
pub fn fixture_database(rows: u64, seed: u64) -> Database {
    let mut rng = SplitMix64::new(seed);
    let mut db = Database::in_memory();
    db.create_table(
        "lineitem",
        vec![
            ColumnSchema::new("quantity", Affinity::Integer),
            ColumnSchema::new("extendedprice", Affinity::Real),
            ColumnSchema::new("discount", Affinity::Real),
        ],
    )
    .expect("fixture schema");
    for _ in 0..rows {
        let quantity = rng.next_range(1, 50);
        let extendedprice = 900.0 + rng.next_f64() * 104_000.0;
        let discount = rng.next_f64() * 0.1;
        db.insert_row(
            "lineitem",
            vec![
                ValueCell::int(quantity),
                ValueCell::real(extendedprice),
                ValueCell::real(discount),
            ],
        )
        .expect("fixture row");
    }

    let parts = (rows / 4).max(1);
    let suppliers = (rows / 10).max(1);
    db.create_table(
        "part",
        vec![
            ColumnSchema::new("PartKey", Affinity::Integer),
            ColumnSchema::new("name", Affinity::Text),
        ],
    )
    .expect("fixture schema");
    for i in 1..=parts {
        db.insert_row(
            "part",
            vec![
                ValueCell::int(i as i64),
                ValueCell::text(format!("part-{i:05}")),
            ],
        )
        .expect("fixture row");
    }
    db.create_table(
        "supplier",
        vec![
            ColumnSchema::new("SuppKey", Affinity::Integer),
            ColumnSchema::new("name", Affinity::Text),
        ],
    )
    .expect("fixture schema");
    for i in 1..=suppliers {
        db.insert_row(
            "supplier",
            vec![
                ValueCell::int(i as i64),
                ValueCell::text(format!("supplier-{i:05}")),
            ],
        )
        .expect("fixture row");
    }
    db.create_table(
        "partsupp",
        vec![
            ColumnSchema::new("PartKey", Affinity::Integer),
            ColumnSchema::new("SuppKey", Affinity::Integer),
        ],
    )
    .expect("fixture schema");
    for _ in 0..rows {
        let pk = rng.next_range(1, parts as i64);
        let sk = rng.next_range(1, suppliers as i64);
        db.insert_row("partsupp", vec![ValueCell::int(pk), ValueCell::int(sk)])
            .expect("fixture row");
    }
    db
}

fn pump(stmt: &mut Statement, checksum: &mut ResultChecksum) -> Result<u64, EngineError> {
    let mut rows = 0u64;
    loop {
        match stmt.step() {
            StepStatus::Row => {
                let row = stmt.result_row()?;
                checksum.add_row(&row);
                rows += 1;
            }
            StepStatus::Done => return Ok(rows),
            StepStatus::Error(kind, m) => return Err(EngineError::Exec(kind, m)),
        }
    }
}

/// Pump a single row and abandon the statement, the host-side lookup idiom.
fn pump_one(
    stmt: &mut Statement,
    checksum: &mut ResultChecksum,
) -> Result<Vec<ValueCell>, EngineError> {
    match stmt.step() {
        StepStatus::Row => {
            let row = stmt.result_row()?;
            checksum.add_row(&row);
            Ok(row)
        }
        StepStatus::Done => Err(EngineError::Usage("lookup returned no row".into())),
        StepStatus::Error(kind, m) => Err(EngineError::Exec(kind, m)),
    }
}

fn drive_select(conn: &Connection, checksum: &mut ResultChecksum) -> Result<(), EngineError> {
    let mut stmt = conn.execute(
        "SELECT quantity, extendedprice, discount FROM lineitem",
        &[],
    )?;
    let (mut sum_qty, mut sum_base, mut sum_disc) = (0i64, 0f64, 0f64);
    loop {
        match stmt.step() {
            StepStatus::Row => {
                let row = stmt.result_row()?;
                checksum.add_row(&row);
                // host-side arithmetic over the returned cells
                sum_qty = sum_qty.wrapping_add(row[0].as_int());
                sum_base += row[1].as_real();
                sum_disc += row[1].as_real() * (1.0 - row[2].as_real());
            }
            StepStatus::Done => break,
            StepStatus::Error(kind, m) => return Err(EngineError::Exec(kind, m)),
        }
    }
    std::hint::black_box((sum_qty, sum_base, sum_disc));
    Ok(())
}

fn drive_innerjoin(conn: &Connection, checksum: &mut ResultChecksum) -> Result<(), EngineError> {
    let mut stmt = conn.execute(
        "SELECT part.name, supplier.name FROM partsupp \
         JOIN part ON partsupp.PartKey = part.PartKey \
         JOIN supplier ON partsupp.SuppKey = supplier.SuppKey",
        &[],
    )?;
    let mut map: HashMap<String, String> = HashMap::new();
    loop {
        match stmt.step() {
            StepStatus::Row => {
                let row = stmt.result_row()?;
                checksum.add_row(&row);
                map.insert(
                    row[0].as_str().unwrap_or("").to_string(),
                    row[1].as_str().unwrap_or("").to_string(),
                );
            }
            StepStatus::Done => break,
            StepStatus::Error(kind, m) => return Err(EngineError::Exec(kind, m)),
        }
    }
    std::hint::black_box(map.len());
    Ok(())
}

fn drive_hostjoin(conn: &Connection, checksum: &mut ResultChecksum) -> Result<(), EngineError> {
    let mut outer = conn.execute("SELECT PartKey, SuppKey FROM partsupp", &[])?;
    let mut map: HashMap<String, String> = HashMap::new();
    loop {
        match outer.step() {
            StepStatus::Row => {
                let row = outer.result_row()?;
                checksum.add_row(&row);
                let (key, suppkey) = (row[0].clone(), row[1].clone());
                let mut c1 = conn.execute("SELECT name FROM part WHERE PartKey = ?", &[key])?;
                let partname = pump_one(&mut c1, checksum)?[0].clone();
                let mut c2 =
                    conn.execute("SELECT name FROM supplier WHERE SuppKey = ?", &[suppkey])?;
                let suppname = pump_one(&mut c2, checksum)?[0].clone();
                map.insert(
                    partname.as_str().unwrap_or("").to_string(),
                    suppname.as_str().unwrap_or("").to_string(),
                );
            }
            StepStatus::Done => break,
            StepStatus::Error(kind, m) => return Err(EngineError::Exec(kind, m)),
        }
    }
    std::hint::black_box(map.len());
    Ok(())
}

/// The scripted absolute-value body used by the hostfunction suite.
pub fn abs_scripted() -> ScriptedExpr {
    ScriptedExpr::parse("(if (lt (arg 0) (const 0)) (neg (arg 0)) (arg 0))").expect("scripted abs")
}

fn drive_hostfunction(conn: &Connection, checksum: &mut ResultChecksum) -> Result<(), EngineError> {
    conn.create_function(
        "host_abs",
        1,
        FunctionImpl::Scripted(Rc::new(abs_scripted())),
    )?;
    let mut stmt = conn.execute("SELECT host_abs(quantity) FROM lineitem", &[])?;
    let mut total = 0i64;
    loop {
        match stmt.step() {
            StepStatus::Row => {
                let row = stmt.result_row()?;
                checksum.add_row(&row);
                total = total.wrapping_add(row[0].as_int());
            }
            StepStatus::Done => break,
            StepStatus::Error(kind, m) => return Err(EngineError::Exec(kind, m)),
        }
    }
    std::hint::black_box(total);
    Ok(())
}

fn drive_hostaggregate(
    conn: &Connection,
    checksum: &mut ResultChecksum,
) -> Result<(), EngineError> {
    // a host-registered scripted sum, the classic user-defined aggregate
    conn.create_aggregate(
        "hostsum",
        1,
        AggStepImpl::Scripted(Rc::new(ScriptedExpr::parse("(add acc (arg 0))").unwrap())),
        AggFinalImpl::Scripted(Rc::new(ScriptedExpr::Acc)),
        ValueCell::int(0),
    )?;
    let mut stmt = conn.execute("SELECT hostsum(quantity) FROM lineitem", &[])?;
    pump(&mut stmt, checksum)?;
    Ok(())
}

fn drive_filltable(
    conn: &Connection,
    rows: u64,
    seed: u64,
    checksum: &mut ResultChecksum,
) -> Result<(), EngineError> {
    conn.run("CREATE TABLE filltable (a INTEGER, b INTEGER)", &[])?;
    let mut rng = SplitMix64::new(seed);
    for i in 0..rows {
        conn.run(
            "INSERT INTO filltable VALUES (?, ?)",
            &[
                ValueCell::int(i as i64 + 1),
                ValueCell::int(rng.next_range(0, 1_000_000)),
            ],
        )?;
    }
    let mut stmt = conn.execute("SELECT a, b FROM filltable", &[])?;
    pump(&mut stmt, checksum)?;
    Ok(())
}

/// Run one suite and collect its report.
///
/// Suites over the shared fixture open their connection before the counters
/// start; suites that customize the connection (function/aggregate
/// registration) or build their own tables include connection setup in the
/// measured region.
pub fn run_bench(
    suite: Suite,
    mode: ExecMode,
    rows: u64,
    seed: u64,
    threshold: u32,
) -> Result<BenchReport, EngineError> {
    if rows == 0 {
        return Err(EngineError::Usage("rows must be positive".into()));
    }
    let start = Instant::now();
    let mut checksum = ResultChecksum::default();
    let conn = match suite {
        Suite::FillTable => Connection::in_memory(),
        _ => Connection::with_database(fixture_database(rows, seed)),
    };
    conn.set_mode(mode);
    conn.set_threshold(threshold);
    conn.reset_metrics();
    match suite {
        Suite::Select | Suite::InnerJoin | Suite::HostJoin => conn.reset_counters(),
        // hostfunction/hostaggregate/filltable keep the connection-open
        // crossing: their environment setup is part of the benchmark
        _ => {}
    }
    match suite {
        Suite::Select => drive_select(&conn, &mut checksum)?,
        Suite::InnerJoin => drive_innerjoin(&conn, &mut checksum)?,
        Suite::HostJoin => drive_hostjoin(&conn, &mut checksum)?,
        Suite::HostFunction => drive_hostfunction(&conn, &mut checksum)?,
        Suite::HostAggregate => drive_hostaggregate(&conn, &mut checksum)?,
        Suite::FillTable => drive_filltable(&conn, rows, seed, &mut checksum)?,
    }
    let counters = conn.counters();
    let metrics = conn.metrics();
    let (mut unopt, mut opt) = (0u64, 0u64);
    for t in conn.trace_summaries() {
        unopt += t.ops_unoptimized as u64;
        opt += t.ops_optimized as u64;
    }
    Ok(BenchReport {
        bench_format: 1,
        benchmark: suite.name().to_string(),
        mode: mode.name().to_string(),
        rows,
        crossings: counters.crossings,
        values_converted: counters.values_converted,
        results_checksum: format!("{:016x}", checksum.value()),
        interp_opcount: metrics.interp_ops,
        trace_opcount_unoptimized: unopt,
        trace_opcount_optimized: opt,
        read_flags_executed: metrics.read_flags_executed,
        opaque_calls_executed: metrics.opaque_calls_executed,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Closed-form crossing/value counts for this harness's drivers over the
/// standard fixture.
pub fn expected_counts(suite: Suite, rows: u64) -> (u64, u64) {
    match suite {
        // execute + per-row step returns + the final DONE return
        Suite::Select => (rows + 2, 3 * rows),
        // every partsupp row matches exactly one part and one supplier
        Suite::InnerJoin => (rows + 2, 2 * rows),
        // outer scan (rows+2) plus two one-row lookups per outer row
        // (execute + row step each); values: 2 out per outer row, then
        // bind in + name out per lookup
        Suite::HostJoin => (5 * rows + 2, 6 * rows),
        // open + register + execute + (rows+1) steps + one callback round
        // trip per row; values: arg out + result in + row out per row
        Suite::HostFunction => (2 * rows + 4, 3 * rows),
        // open + register + execute + rows step-callbacks + finalize +
        // ROW + DONE; values: (acc+arg) out + acc' in per row, 2 at
        // finalize, 1 result row
        Suite::HostAggregate => (rows + 6, 3 * rows + 3),
        // open + create + rows one-shot inserts + readback (rows+2);
        // values: 2 bound per insert, 2 out per readback row
        Suite::FillTable => (2 * rows + 4, 4 * rows),
    }
}
