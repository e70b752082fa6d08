use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use schaladb::harness::{run_experiment, ExperimentGrid, ExperimentKind, MetricsReport};
use schaladb::query::QueryResult;
use schaladb::{Scalar, SteeringAction};
use schaladb_cli::engine::{ExecutorKind, StatusReport};
use schaladb_cli::{config, ApiClient, EngineHandle, EngineOptions, EngineState, HttpService};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "schaladb", version, about = "Many-task workflow engine over a partitioned in-memory store")]
struct Cli {
    /// Topology file (JSON). Falls back to SCHALADB_CONFIG, then the built-in single-machine layout.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Launch data nodes, connectors and the HTTP service.
    Start {
        /// Stay attached instead of running as a background daemon.
        #[arg(long)]
        foreground: bool,
        /// Simulated per-transaction service time, for experiments.
        #[arg(long, default_value_t = 0)]
        txn_cost_us: u64,
    },
    #[command(hide = true)]
    Daemon {
        #[arg(long, default_value_t = 0)]
        txn_cost_us: u64,
    },
    /// Initialize the tables.
    Setup {
        #[arg(long, required = true)]
        create: bool,
    },
    /// Launch the supervisor and workers for a workflow and wait for it to finish.
    Run {
        #[arg(long)]
        workflow: PathBuf,
        /// JSON array of input tuples (field maps).
        #[arg(long)]
        inputs: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Exec::Synthetic)]
        executor: Exec,
        /// Return as soon as the run is launched.
        #[arg(long)]
        no_wait: bool,
    },
    /// Engine state and task counts.
    Status,
    /// Run Q1..Q7, a JSON plan or a SELECT statement.
    Query {
        #[arg(short = 'q', long = "query")]
        text: String,
        #[arg(long = "param", value_parser = key_value)]
        params: Vec<(String, String)>,
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
        /// Evaluate as of this store time (ms).
        #[arg(long)]
        now: Option<u64>,
    },
    /// Rewrite or prune READY tasks of an activity.
    Steer {
        #[arg(value_enum)]
        kind: SteerVerb,
        #[arg(long)]
        activity: String,
        #[arg(long = "where")]
        predicate: String,
        #[arg(long = "set", value_parser = key_value)]
        set: Vec<(String, String)>,
    },
    /// Derivation path of a tuple back to the workflow inputs.
    Provenance {
        #[arg(long)]
        tuple: u64,
    },
    /// Run an experiment grid in-process and print its CSV.
    Bench {
        kind: ExperimentKind,
        #[arg(long)]
        grid: PathBuf,
        /// Also write the CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stop the engine.
    Shutdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum Exec {
    Synthetic,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum SteerVerb {
    Update,
    Prune,
}

fn key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected key=value, got {s}"))
}

type CliResult = Result<(), String>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let config_path = config::resolve(cli.config.as_deref());
    let topo = config::load(config_path.as_deref()).map_err(|e| e.to_string())?;
    let api = ApiClient::new(config::service_url(&topo));
    match cli.verb {
        Verb::Start { foreground, txn_cost_us } => {
            if api.reachable() {
                return Err(format!("already started at {}", api.base()));
            }
            if foreground {
                daemon(topo, txn_cost_us)
            } else {
                spawn_daemon(config_path.as_deref(), txn_cost_us, &api)
            }
        }
        Verb::Daemon { txn_cost_us } => daemon(topo, txn_cost_us),
        Verb::Setup { .. } => {
            api.post("engine/setup", &json!({})).map_err(|e| e.to_string())?;
            println!("database created");
            Ok(())
        }
        Verb::Run {
            workflow,
            inputs,
            executor,
            no_wait,
        } => run(&api, &workflow, inputs.as_deref(), executor, no_wait),
        Verb::Status => {
            let s: StatusReport = api.get_as("status", &[]).map_err(|e| e.to_string())?;
            print_status(&s);
            Ok(())
        }
        Verb::Query { text, params, csv, now } => {
            let params: serde_json::Map<String, Value> =
                params.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
            let body = match text.trim().parse::<schaladb::query::QueryId>() {
                Ok(q) => json!({"id": q.to_string(), "params": params, "now": now}),
                Err(_) => json!({"plan": text, "params": params, "now": now}),
            };
            let r: QueryResult = api.post_as("query", &body).map_err(|e| e.to_string())?;
            if csv {
                print!("{}", r.to_csv());
            } else {
                print!("{r}");
                println!("({} rows)", r.rows.len());
            }
            Ok(())
        }
        Verb::Steer {
            kind,
            activity,
            predicate,
            set,
        } => {
            let set: serde_json::Map<String, Value> = set
                .into_iter()
                .map(|(k, v)| (k, serde_json::to_value(Scalar::parse_text(&v)).unwrap_or(Value::Null)))
                .collect();
            let kind = match kind {
                SteerVerb::Update => "update",
                SteerVerb::Prune => "prune",
            };
            let body = json!({"kind": kind, "activity": activity, "where": predicate, "set": set});
            let a: SteeringAction = api.post_as("steer", &body).map_err(|e| e.to_string())?;
            println!(
                "action {} ({kind}) on activity {}: affected tasks {:?}",
                a.action_id, a.activity_id, a.affected_task_ids
            );
            Ok(())
        }
        Verb::Provenance { tuple } => {
            let d = api
                .get("provenance", &[("tuple_id", tuple.to_string())])
                .map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&d).unwrap_or_default());
            Ok(())
        }
        Verb::Bench { kind, grid, out } => bench(kind, &grid, out.as_deref()),
        Verb::Shutdown => {
            api.post("engine/shutdown", &json!({})).map_err(|e| e.to_string())?;
            let deadline = Instant::now() + Duration::from_secs(10);
            while api.reachable() && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(50));
            }
            println!("shut down");
            Ok(())
        }
    }
}

fn daemon(topo: schaladb::ClusterTopology, txn_cost_us: u64) -> CliResult {
    let url = config::service_url(&topo);
    let addr = url.trim_start_matches("http://").to_string();
    let engine = EngineHandle::new(
        topo,
        EngineOptions {
            txn_cost_us,
            ..EngineOptions::default()
        },
    );
    engine.start().map_err(|e| e.to_string())?;
    let service = HttpService::bind(&addr, engine.clone()).map_err(|e| format!("bind {addr}: {e}"))?;
    eprintln!("schaladb listening on {}", service.url());
    service.join();
    engine.shutdown();
    Ok(())
}

fn spawn_daemon(config_path: Option<&Path>, txn_cost_us: u64, api: &ApiClient) -> CliResult {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let log_path = std::env::temp_dir().join(format!(
        "schaladb-{}.log",
        api.base().rsplit(':').next().unwrap_or("daemon")
    ));
    let log = std::fs::File::create(&log_path).map_err(|e| format!("{}: {e}", log_path.display()))?;
    let mut cmd = Command::new(exe);
    if let Some(p) = config_path {
        cmd.arg("--config").arg(p);
    }
    let mut child = cmd
        .arg("daemon")
        .arg("--txn-cost-us")
        .arg(txn_cost_us.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(log.try_clone().map_err(|e| e.to_string())?)
        .spawn()
        .map_err(|e| format!("cannot launch daemon: {e}"))?;
    let deadline = Instant::now() + Duration::from_secs(15);
    while Instant::now() < deadline {
        if let Ok(Some(status)) = child.try_wait() {
            let tail = std::fs::read_to_string(&log_path).unwrap_or_default();
            return Err(format!("daemon exited with {status}: {}", tail.trim()));
        }
        if let Ok(s) = api.get_as::<StatusReport>("status", &[]) {
            println!(
                "store up at {}: {} workers, {} data nodes, {} connectors (log {})",
                api.base(),
                s.topology.worker_count(),
                s.topology.data_node_count(),
                s.topology.connector_count(),
                log_path.display()
            );
            for w in &s.warnings {
                println!("warning: {w}");
            }
            return Ok(());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    let _ = child.kill();
    Err("daemon did not come up within 15 s".into())
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(api: &ApiClient, workflow: &Path, inputs: Option<&Path>, exec: Exec, no_wait: bool) -> CliResult {
    let workflow = read_json(workflow)?;
    let inputs = match inputs {
        Some(p) => read_json(p)?,
        None => json!([]),
    };
    let executor = match exec {
        Exec::Synthetic => ExecutorKind::Synthetic,
        Exec::External => ExecutorKind::External,
    };
    let body = json!({"workflow": workflow, "inputs": inputs, "executor": executor});
    api.post("engine/run", &body).map_err(|e| e.to_string())?;
    if no_wait {
        println!("running");
        return Ok(());
    }
    loop {
        let s: StatusReport = api.get_as("status", &[]).map_err(|e| e.to_string())?;
        match s.state {
            EngineState::Running => std::thread::sleep(Duration::from_millis(200)),
            EngineState::Complete => {
                let m: MetricsReport = api.get_as("metrics", &[]).map_err(|e| e.to_string())?;
                print_status(&s);
                println!(
                    "elapsed {:.0} ms, {:.1} tasks/s, store access {:.1}% of elapsed",
                    m.elapsed_ms,
                    m.throughput_tps,
                    100.0 * m.access_fraction
                );
                return Ok(());
            }
            other => return Err(format!("run ended in state {other}")),
        }
    }
}

fn print_status(s: &StatusReport) {
    println!(
        "state {}  workflow {}  tasks {}",
        s.state,
        s.workflow_id.as_deref().unwrap_or("-"),
        s.total
    );
    let fmt = |c: &std::collections::BTreeMap<String, u64>| {
        c.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    };
    println!("  all       {}", fmt(&s.counts));
    for (w, c) in &s.per_worker {
        println!("  worker {w:<2} {}", fmt(c));
    }
}

fn bench(kind: ExperimentKind, grid: &Path, out: Option<&Path>) -> CliResult {
    // The file holds either `{"cells": [...]}` or a bare array of cells; the kind comes from the command line.
    let cells = match read_json(grid)? {
        Value::Object(mut o) => o.remove("cells").unwrap_or(Value::Null),
        other => other,
    };
    let kind_value = serde_json::to_value(kind).map_err(|e| e.to_string())?;
    let grid: ExperimentGrid = serde_json::from_value(json!({"kind": kind_value, "cells": cells}))
        .map_err(|e| format!("{}: {e}", grid.display()))?;
    let result = run_experiment(&grid).map_err(|e| e.to_string())?;
    let csv = result.csv();
    if let Some(p) = out {
        std::fs::write(p, &csv).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    print!("{csv}");
    println!("{}", result.summary());
    Ok(())
}
