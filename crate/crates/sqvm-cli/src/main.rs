//! Command-line surface for the sqvm engine: run queries, inspect compiled
//! programs and traces, generate fixtures, load CSV data, and run the
//! instrumented micro-benchmarks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sqvm::bench::{fixture_database, run_bench, Suite};
use sqvm::{Affinity, ColumnSchema, Connection, Database, ExecMode, StepStatus, ValueCell};

#[derive(Parser)]
#[command(
    name = "sqvm",
    about = "Embedded SQL engine with a register bytecode interpreter and trace optimizer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a SQL statement and print result rows tab-separated.
    Run {
        /// Database file (created on first write if missing).
        #[arg(long)]
        db: PathBuf,
        /// Positional parameters for `?` placeholders. Integer- and
        /// real-shaped values bind numerically, `NULL` binds NULL,
        /// anything else binds as text.
        #[arg(long = "param")]
        params: Vec<String>,
        /// Print the compiled program instead of executing.
        #[arg(long)]
        explain: bool,
        /// Execution mode: interp, full, no-inline, no-flags.
        #[arg(long, default_value = "full")]
        mode: String,
        /// Hot-loop threshold.
        #[arg(long, default_value_t = 16)]
        threshold: u32,
        /// Register a scripted scalar function before running, as
        /// `name/arity=(expr)` in the prefix form, e.g.
        /// `myabs/1=(if (lt (arg 0) (const 0)) (neg (arg 0)) (arg 0))`.
        #[arg(long = "function")]
        functions: Vec<String>,
        sql: String,
    },
    /// Print the compiled program for a statement.
    Explain {
        #[arg(long)]
        db: PathBuf,
        sql: String,
    },
    /// Generate a seeded benchmark fixture database.
    Gen {
        #[arg(long)]
        rows: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output database file.
        #[arg(long)]
        db: PathBuf,
    },
    /// Run one micro-benchmark suite with instrumented counters.
    Bench {
        /// select, innerjoin, hostjoin, hostfunction, hostaggregate, filltable.
        #[arg(long)]
        suite: String,
        /// interp, full, no-inline, no-flags.
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value_t = 1000)]
        rows: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        threshold: u32,
        /// Output format: text or json.
        #[arg(long, default_value = "text")]
        format: String,
        /// Re-run in interp mode and fail (exit 2) on a checksum mismatch.
        #[arg(long)]
        verify: bool,
    },
    /// Warm a query's hot loop, then print the attached trace listing.
    TraceDump {
        #[arg(long)]
        db: PathBuf,
        /// Rows to pump before dumping.
        #[arg(long, default_value_t = 32)]
        warm: u64,
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value_t = 16)]
        threshold: u32,
        /// Register a scripted scalar function first; see `run --function`.
        #[arg(long = "function")]
        functions: Vec<String>,
        sql: String,
    },
    /// Load a CSV file into a table, creating it if absent.
    Load {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        table: String,
        #[arg(long)]
        csv: PathBuf,
        /// Column schema entries, `name:AFFINITY` with affinity one of
        /// INTEGER, REAL, TEXT, NONE. Repeat per column.
        #[arg(long = "col")]
        cols: Vec<String>,
        /// Skip the first CSV record as a header row.
        #[arg(long)]
        header: bool,
    },
}

fn parse_param(text: &str) -> ValueCell {
    if text.eq_ignore_ascii_case("null") {
        ValueCell::null()
    } else if let Ok(i) = text.parse::<i64>() {
        ValueCell::int(i)
    } else if let Ok(r) = text.parse::<f64>() {
        ValueCell::real(r)
    } else {
        ValueCell::text(text)
    }
}

fn parse_mode(text: &str) -> Result<ExecMode, String> {
    ExecMode::parse(text)
        .ok_or_else(|| format!("unknown mode '{text}' (expected interp|full|no-inline|no-flags)"))
}

fn register_functions(conn: &Connection, specs: &[String]) -> Result<(), String> {
    for spec in specs {
        let (head, body) = spec
            .split_once('=')
            .ok_or_else(|| format!("bad --function '{spec}', expected name/arity=(expr)"))?;
        let (name, arity) = head
            .split_once('/')
            .ok_or_else(|| format!("bad --function '{spec}', expected name/arity=(expr)"))?;
        let n_args: usize = arity
            .parse()
            .map_err(|_| format!("bad arity in --function '{spec}'"))?;
        let expr = sqvm::ScriptedExpr::parse(body)
            .map_err(|e| format!("bad expression in --function '{spec}': {e}"))?;
        conn.create_function(
            name,
            n_args,
            sqvm::hostapi::FunctionImpl::Scripted(expr.into()),
        )
        .map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn is_write_statement(sql: &str) -> bool {
    let head = sql.trim_start().to_ascii_uppercase();
    head.starts_with("INSERT") || head.starts_with("CREATE")
}

fn cmd_run(
    db: &Path,
    sql: &str,
    params: &[String],
    explain: bool,
    mode: ExecMode,
    threshold: u32,
    functions: &[String],
) -> Result<(), String> {
    let conn = Connection::open(db).map_err(|e| e.to_string())?;
    conn.set_mode(mode);
    conn.set_threshold(threshold);
    register_functions(&conn, functions)?;
    if explain {
        let text = conn.explain(sql).map_err(|e| e.to_string())?;
        print!("{text}");
        return Ok(());
    }
    let mut stmt = conn.prepare(sql).map_err(|e| e.to_string())?;
    for (i, p) in params.iter().enumerate() {
        stmt.bind(i + 1, parse_param(p))
            .map_err(|e| e.to_string())?;
    }
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    loop {
        match stmt.step() {
            StepStatus::Row => {
                let row = stmt.result_row().map_err(|e| e.to_string())?;
                let line: Vec<String> = row.iter().map(ValueCell::render_sql).collect();
                match writeln!(out, "{}", line.join("\t")) {
                    Ok(()) => {}
                    // the reader went away (e.g. piped into head); stop quietly
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => return Ok(()),
                    Err(e) => return Err(e.to_string()),
                }
            }
            StepStatus::Done => break,
            StepStatus::Error(kind, m) => return Err(format!("{kind:?}: {m}")),
        }
    }
    out.flush().ok();
    drop(out);
    if is_write_statement(sql) {
        conn.save(db).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn cmd_gen(rows: u64, seed: u64, db: &Path) -> Result<(), String> {
    if rows == 0 {
        return Err("usage error: --rows must be positive".into());
    }
    fixture_database(rows, seed)
        .save(db)
        .map_err(|e| e.to_string())?;
    println!(
        "wrote fixture with {rows} lineitem/partsupp rows (seed {seed}) to {}",
        db.display()
    );
    Ok(())
}

fn cmd_bench(
    suite: &str,
    mode: ExecMode,
    rows: u64,
    seed: u64,
    threshold: u32,
    format: &str,
    verify: bool,
) -> Result<bool, String> {
    let suite = Suite::parse(suite).ok_or_else(|| format!("unknown suite '{suite}'"))?;
    let report = run_bench(suite, mode, rows, seed, threshold).map_err(|e| e.to_string())?;
    match format {
        "json" => println!("{}", report.to_json()),
        "text" => print!("{}", report.to_text()),
        other => return Err(format!("unknown format '{other}' (expected text|json)")),
    }
    if verify && mode != ExecMode::Interp {
        let baseline =
            run_bench(suite, ExecMode::Interp, rows, seed, threshold).map_err(|e| e.to_string())?;
        if baseline.results_checksum != report.results_checksum {
            eprintln!(
                "verification failed: {} checksum {} differs from interp {}",
                mode.name(),
                report.results_checksum,
                baseline.results_checksum
            );
            return Ok(false);
        }
        println!("verified: checksum matches interp mode");
    }
    Ok(true)
}

fn cmd_trace_dump(
    db: &Path,
    sql: &str,
    warm: u64,
    mode: ExecMode,
    threshold: u32,
    functions: &[String],
) -> Result<(), String> {
    let conn = Connection::open(db).map_err(|e| e.to_string())?;
    conn.set_mode(mode);
    conn.set_threshold(threshold);
    register_functions(&conn, functions)?;
    let mut stmt = conn.prepare(sql).map_err(|e| e.to_string())?;
    let mut pumped = 0u64;
    while pumped < warm {
        match stmt.step() {
            StepStatus::Row => pumped += 1,
            StepStatus::Done => break,
            StepStatus::Error(kind, m) => return Err(format!("{kind:?}: {m}")),
        }
    }
    let dumps = stmt.trace_dumps();
    if dumps.is_empty() {
        return Err(format!(
            "no trace formed after {pumped} rows (threshold {threshold}); warm more rows"
        ));
    }
    for d in dumps {
        print!("{d}");
    }
    Ok(())
}

fn cmd_load(
    db_path: &Path,
    table: &str,
    csv: &Path,
    cols: &[String],
    header: bool,
) -> Result<(), String> {
    let mut schema = Vec::new();
    for spec in cols {
        let (name, aff) = spec
            .split_once(':')
            .ok_or_else(|| format!("bad --col '{spec}', expected name:AFFINITY"))?;
        let affinity = Affinity::parse(aff)
            .ok_or_else(|| format!("bad affinity '{aff}' in --col '{spec}'"))?;
        schema.push(ColumnSchema::new(name, affinity));
    }
    let mut db = Database::open(db_path).map_err(|e| e.to_string())?;
    let loaded = db
        .load_csv(table, csv, schema, header)
        .map_err(|e| e.to_string())?;
    db.save(db_path).map_err(|e| e.to_string())?;
    println!("loaded {loaded} rows into {table}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool, String> {
    match cli.command {
        Command::Run {
            db,
            params,
            explain,
            mode,
            threshold,
            functions,
            sql,
        } => {
            let mode = parse_mode(&mode)?;
            cmd_run(&db, &sql, &params, explain, mode, threshold, &functions).map(|_| true)
        }
        Command::Explain { db, sql } => {
            let conn = Connection::open(&db).map_err(|e| e.to_string())?;
            let text = conn.explain(&sql).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(true)
        }
        Command::Gen { rows, seed, db } => cmd_gen(rows, seed, &db).map(|_| true),
        Command::Bench {
            suite,
            mode,
            rows,
            seed,
            threshold,
            format,
            verify,
        } => {
            let mode = parse_mode(&mode)?;
            cmd_bench(&suite, mode, rows, seed, threshold, &format, verify)
        }
        Command::TraceDump {
            db,
            warm,
            mode,
            threshold,
            functions,
            sql,
        } => {
            let mode = parse_mode(&mode)?;
            cmd_trace_dump(&db, &sql, warm, mode, threshold, &functions).map(|_| true)
        }
        Command::Load {
            db,
            table,
            csv,
            cols,
            header,
        } => cmd_load(&db, &table, &csv, &cols, header).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // a completed command whose verification failed
        Ok(false) => ExitCode::from(2),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
