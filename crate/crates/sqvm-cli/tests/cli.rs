//! End-to-end checks of the sqvm binary: exit codes, output formats, and
//! fixture determinism.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sqvm"))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sqvm-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gen_is_deterministic_and_rejects_zero_rows() {
    let dir = tmpdir("gen");
    let (a, b) = (dir.join("a.db"), dir.join("b.db"));
    for path in [&a, &b] {
        let out = bin()
            .args(["gen", "--rows", "10", "--seed", "42", "--db"])
            .arg(path)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = bin()
        .args(["gen", "--rows", "0", "--db"])
        .arg(dir.join("zero.db"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("usage"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_prints_rows_and_persists_writes() {
    let dir = tmpdir("run");
    let db = dir.join("t.db");
    let ok = |args: &[&str]| {
        let out = bin().args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        stdout(&out)
    };
    let dbs = db.to_str().unwrap();
    ok(&["run", "--db", dbs, "CREATE TABLE kv (k INTEGER, v TEXT)"]);
    ok(&["run", "--db", dbs, "INSERT INTO kv VALUES (1, 'one')"]);
    ok(&[
        "run",
        "--db",
        dbs,
        "--param",
        "2",
        "--param",
        "NULL",
        "INSERT INTO kv VALUES (?, ?)",
    ]);
    let text = ok(&["run", "--db", dbs, "SELECT k, v FROM kv"]);
    assert_eq!(text, "1\tone\n2\tNULL\n");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_reports_syntax_errors_with_offset() {
    let dir = tmpdir("err");
    let db = dir.join("t.db");
    let out = bin()
        .args(["run", "--db", db.to_str().unwrap(), "SELEKT x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("offset 0"), "{}", stderr(&out));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn explain_flag_prints_program_without_executing() {
    let dir = tmpdir("explain");
    let db = dir.join("t.db");
    let dbs = db.to_str().unwrap();
    bin()
        .args(["gen", "--rows", "2", "--db", dbs])
        .output()
        .unwrap();
    let out = bin()
        .args([
            "run",
            "--db",
            dbs,
            "--explain",
            "SELECT quantity, extendedprice, discount FROM lineitem",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("0|Init|0|12|0||00|\n"));
    assert!(text.contains("9|Next|0|3|0||01|\n"));
    // the explain subcommand prints the same listing
    let out2 = bin()
        .args([
            "explain",
            "--db",
            dbs,
            "SELECT quantity, extendedprice, discount FROM lineitem",
        ])
        .output()
        .unwrap();
    assert_eq!(stdout(&out2), text);
    // executing the same query over the 2-row fixture prints 2 lines
    let out3 = bin()
        .args([
            "run",
            "--db",
            dbs,
            "SELECT quantity, extendedprice, discount FROM lineitem",
        ])
        .output()
        .unwrap();
    assert!(out3.status.success());
    assert_eq!(stdout(&out3).lines().count(), 2);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn scripted_function_registration_from_the_command_line() {
    let dir = tmpdir("fnreg");
    let db = dir.join("t.db");
    let dbs = db.to_str().unwrap();
    bin()
        .args(["run", "--db", dbs, "CREATE TABLE t (v INTEGER)"])
        .output()
        .unwrap();
    bin()
        .args(["run", "--db", dbs, "INSERT INTO t VALUES (-9)"])
        .output()
        .unwrap();
    let out = bin()
        .args([
            "run",
            "--db",
            dbs,
            "--function",
            "myabs/1=(if (lt (arg 0) (const 0)) (neg (arg 0)) (arg 0))",
            "SELECT myabs(v) FROM t",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "9\n");
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_json_and_verify() {
    let out = bin()
        .args([
            "bench", "--suite", "select", "--mode", "full", "--rows", "50", "--format", "json",
            "--verify",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let json_part = text.split("verified").next().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(json_part.trim()).unwrap();
    assert_eq!(parsed["bench_format"], 1);
    assert_eq!(parsed["benchmark"], "select");
    assert_eq!(parsed["crossings"], 52);
    assert!(text.contains("verified: checksum matches interp mode"));
}

#[test]
fn trace_dump_needs_a_warm_loop() {
    let dir = tmpdir("trace");
    let db = dir.join("t.db");
    let dbs = db.to_str().unwrap();
    bin()
        .args(["gen", "--rows", "64", "--db", dbs])
        .output()
        .unwrap();
    let query = "SELECT quantity, extendedprice, discount FROM lineitem";
    let out = bin()
        .args(["trace-dump", "--db", dbs, "--warm", "32", query])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("# opcode Next"));
    assert!(text.contains("# opcode RealAffinity"));
    assert!(text.contains("ops: "));

    // under-warmed: threshold not reached, exit 1
    let out = bin()
        .args(["trace-dump", "--db", dbs, "--warm", "4", query])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("no trace"));

    // the no-flags ablation keeps the affinity checks in the listing
    let out = bin()
        .args([
            "trace-dump",
            "--db",
            dbs,
            "--warm",
            "32",
            "--mode",
            "no-flags",
            query,
        ])
        .output()
        .unwrap();
    assert!(stdout(&out).contains("affinity_real"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn load_csv_into_table() {
    let dir = tmpdir("load");
    let db = dir.join("t.db");
    let csv = dir.join("in.csv");
    std::fs::write(&csv, "a,b\n1,2.5\n3,\n").unwrap();
    let out = bin()
        .args([
            "load",
            "--db",
            db.to_str().unwrap(),
            "--table",
            "t",
            "--csv",
            csv.to_str().unwrap(),
            "--col",
            "a:INTEGER",
            "--col",
            "b:REAL",
            "--header",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("loaded 2 rows"));
    let out = bin()
        .args(["run", "--db", db.to_str().unwrap(), "SELECT a, b FROM t"])
        .output()
        .unwrap();
    assert_eq!(stdout(&out), "1\t2.5\n3\tNULL\n");
    std::fs::remove_dir_all(&dir).ok();
}
