//! The binary end to end: start, setup, run, query, steer and shutdown against
//! a daemon on free local ports.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_schaladb");

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Session {
    dir: tempfile::TempDir,
    config: PathBuf,
    url: String,
}

impl Session {
    fn new(threads: u32) -> Session {
        let dir = tempfile::tempdir().unwrap();
        let http = free_port();
        let (c1, c2) = (free_port(), free_port());
        let topo = json!({
            "nodes": [
                {"id": "n1", "roles": [
                    {"role": "worker", "index": 1}, {"role": "data_node", "index": 1},
                    {"role": "connector", "index": 1, "port": c1}, {"role": "supervisor"}]},
                {"id": "n2", "roles": [
                    {"role": "worker", "index": 2}, {"role": "data_node", "index": 2},
                    {"role": "connector", "index": 2, "port": c2}, {"role": "secondary_supervisor"}]}
            ],
            "threads_per_worker": threads,
            "replicate": true,
            "http_port": http
        });
        let config = dir.path().join("topology.json");
        std::fs::write(&config, topo.to_string()).unwrap();
        Session {
            dir,
            config,
            url: format!("http://127.0.0.1:{http}"),
        }
    }

    fn cli(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cli(args);
        let stdout = String::from_utf8_lossy(&out.stdout).to_string();
        assert!(
            out.status.success(),
            "{args:?} failed\nstdout: {stdout}\nstderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        stdout
    }

    fn write(&self, name: &str, value: &Value) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, value.to_string()).unwrap();
        p
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.cli(&["shutdown"]);
    }
}

fn workflow(mean_ms: u64) -> Value {
    let act = |id: &str, name: &str| {
        json!({
            "activity_id": id, "name": name, "operator": "MAP",
            "command_template": "/run a={a} b={b} c={c}",
            "input_schema": ["a", "b", "c"], "output_schema": ["a", "b", "c", "x", "y"],
            "mean_duration_ms": mean_ms
        })
    };
    json!({
        "workflow_id": "wf-cli",
        "activities": [act("1", "Data Gathering"), act("2", "Pre-Processing"), act("3", "Analyze Tension")],
        "edges": [["1", "2"], ["2", "3"]],
        "input_schema": ["a", "b", "c"]
    })
}

fn inputs(n: usize) -> Value {
    Value::Array(
        (0..n)
            .map(|i| json!({"a": 0.1 * (i + 1) as f64, "b": 10.0 + i as f64, "c": 5.0}))
            .collect(),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn typical_session_runs_end_to_end() {
    let s = Session::new(2);
    let wf = s.write("wf.json", &workflow(20));
    let inp = s.write("inputs.json", &inputs(6));

    // Nothing running yet.
    let out = s.cli(&["query", "-q", "Q4"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("store not started"));

    let started = s.ok(&["start"]);
    assert!(started.contains("2 workers, 2 data nodes, 2 connectors"), "{started}");
    let again = s.cli(&["start"]);
    assert!(!again.status.success());

    let early = s.cli(&["run", "--workflow", path(&wf), "--inputs", path(&inp)]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("database not created"));

    s.ok(&["setup", "--create"]);
    let summary = s.ok(&["run", "--workflow", path(&wf), "--inputs", path(&inp)]);
    assert!(summary.contains("state COMPLETE"), "{summary}");
    assert!(summary.contains("FINISHED=18"), "{summary}");

    let running = s.ok(&[
        "query",
        "-q",
        "SELECT task_id, start_time FROM work_queue WHERE status = 'RUNNING' ORDER BY start_time",
    ]);
    assert!(running.contains("(0 rows)"), "{running}");
    let q4 = s.ok(&["query", "-q", "Q4", "--param", "workflow=wf-cli", "--csv"]);
    let lines: Vec<&str> = q4.lines().collect();
    assert_eq!(lines.len(), 2, "{q4}");
    assert_eq!(lines[1], "0");

    // The CLI prints what the HTTP API returns.
    let api = schaladb_cli::ApiClient::new(s.url.clone());
    let via_http = api
        .post("query", &json!({"id": "Q6", "params": {}, "now": 0}))
        .unwrap();
    let csv = s.ok(&["query", "-q", "Q6", "--csv", "--now", "0"]);
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), via_http["rows"].as_array().unwrap().len());

    let prov = s.ok(&["provenance", "--tuple", "20"]);
    assert!(prov.contains("input_tuple_ids"), "{prov}");

    s.ok(&["shutdown"]);
    let after = s.cli(&["status"]);
    assert!(!after.status.success());
}

#[test]
fn steering_from_the_command_line() {
    let s = Session::new(1);
    let wf = s.write("wf.json", &workflow(400));
    let inp = s.write("inputs.json", &inputs(8));
    s.ok(&["start"]);
    s.ok(&["setup", "--create"]);
    s.ok(&["run", "--workflow", path(&wf), "--inputs", path(&inp), "--no-wait"]);

    let unknown = s.cli(&["steer", "prune", "--activity", "9", "--where", "a < 1"]);
    assert!(!unknown.status.success());
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("activity 9"));

    // With one thread per worker most activity-1 tasks are still READY.
    let out = s.ok(&["steer", "prune", "--activity", "1", "--where", "a > 0.5"]);
    assert!(out.contains("affected tasks ["), "{out}");
    let st = s.ok(&["status"]);
    assert!(st.contains("state RUNNING") || st.contains("state COMPLETE"), "{st}");
    let aborted = s.ok(&["query", "-q", "SELECT task_id FROM work_queue WHERE status = 'ABORTED'", "--csv"]);
    let list = out.split_once('[').and_then(|(_, r)| r.split_once(']')).unwrap().0;
    let pruned: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let aborted: Vec<&str> = aborted.lines().skip(1).collect();
    assert_eq!(aborted, pruned, "{out}");
}

#[test]
fn bench_runs_a_grid_in_process() {
    let s = Session::new(1);
    let cell = json!({"n_tasks": 14, "mean_task_ms": 5, "workers": 2, "threads": 2, "timeout_ms": 60000});
    let grid = s.write("grid.json", &json!({"cells": [cell]}));
    let out_csv = s.dir.path().join("out.csv");
    let out = s.ok(&["bench", "db-overhead", "--grid", path(&grid), "--out", path(&out_csv)]);
    assert!(out.starts_with("kind,mode,n_tasks"), "{out}");
    let written = std::fs::read_to_string(&out_csv).unwrap();
    assert_eq!(written.lines().count(), 2);
    assert!(written.lines().nth(1).unwrap().starts_with("db_overhead,distributed,14,5,2,2"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"nodes": []}"#).unwrap();
    let out = Command::new(BIN)
        .env("SCHALADB_CONFIG", &cfg)
        .arg("status")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid topology"));
}
