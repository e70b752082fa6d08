//! Workload generation and in-process engine runs for benchmarking.
//!
//! A run stands up a store, connectors, one supervisor (plus a standby), W
//! worker nodes and optionally a periodic query client, all as threads in
//! this process, and reports caller-side store-access metrics. The
//! centralized mode replaces connectors with a single master that owns the
//! only store connection and serializes every request.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::connector::{distribute, Connector, FailoverClient, TimedClient};
use crate::error::{StoreError, StoreResult};
use crate::model::{
    ActivitySpec, ClusterTopology, DomainTuple, Operator, Scalar, SteeringAction, Task, TaskId, TaskStatus,
    WorkflowSpec,
};
use crate::predicate::Predicate;
use crate::protocol::{Request, Response, StoreApi, StoreClient};
use crate::query::{self, Params, QueryId};
use crate::supervisor::{standby_loop, supervisor_loop, SupervisorConfig, SupervisorOutcome};
use crate::taskstore::{AccessCategory, AccessTimer, NewTuple, StatusCounts, Store, StoreConfig, TableDump};
use crate::worker::{worker_loop, ExecOutcome, Executor, SyntheticExecutor, WorkerConfig, WorkerStats};

/// Names of the bundled seven-step chain; positions 2, 4 and 5 matter to the
/// predefined queries and steering examples.
pub const RISERS_ACTIVITIES: [&str; 7] = [
    "Data Gathering",
    "Pre-Processing",
    "Analyze Tension",
    "Calculate Wear and Tear",
    "Analyze Risers",
    "Calculate Fatigue Life",
    "Compress Results",
];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Distributed,
    Centralized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Milliseconds after the workflow is registered.
    AfterMs(u64),
    /// Once this many tasks are FINISHED.
    AfterFinished(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    KillConnector(u32),
    /// Stops the primary supervisor as if its process died.
    KillSupervisor,
    /// Fails a data node, then promotes replicas of its partitions.
    KillDataNode(u32),
    /// The first attempt of each listed task is abandoned by its worker
    /// thread; the trigger is ignored.
    AbandonTasks(Vec<TaskId>),
    /// A user steering action issued mid-run: rewrite inputs of READY tasks.
    SteerUpdate {
        activity_id: String,
        predicate: Predicate,
        set: BTreeMap<String, Scalar>,
    },
    /// A user steering action issued mid-run: abort matching READY tasks.
    SteerPrune { activity_id: String, predicate: Predicate },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureInjection {
    pub when: Trigger,
    pub what: Fault,
}

/// Latency and timing knobs for in-process runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Service time of one store transaction, spent holding the partition.
    pub txn_us: u64,
    /// One network hop (client to connector, or worker to master).
    pub hop_us: u64,
    pub supervisor_poll_ms: u64,
    pub backoff_min_ms: u64,
    pub backoff_max_ms: u64,
    pub takeover_ms: u64,
    pub lease_floor_ms: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            txn_us: 200,
            hop_us: 100,
            supervisor_poll_ms: 50,
            backoff_min_ms: 5,
            backoff_max_ms: 50,
            takeover_ms: 500,
            lease_floor_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkloadSpec {
    pub n_tasks: u64,
    pub mean_task_ms: u64,
    pub n_activities: u32,
    /// Operator per activity; missing entries are MAP.
    pub operators: Vec<Operator>,
    pub workers: u32,
    pub threads: u32,
    pub data_nodes: u32,
    pub replicate: bool,
    /// Connectors; 0 means one per worker.
    pub connectors: u32,
    pub failures: Vec<FailureInjection>,
    /// Run Q1–Q7 in a loop at this interval.
    pub query_interval_ms: Option<u64>,
    pub seed: u64,
    pub failure_prob: f64,
    pub max_retries: u32,
    pub mode: Mode,
    pub costs: CostModel,
    /// Give up after this long.
    pub timeout_ms: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            n_tasks: 70,
            mean_task_ms: 10,
            n_activities: 7,
            operators: Vec::new(),
            workers: 2,
            threads: 2,
            data_nodes: 1,
            replicate: false,
            connectors: 0,
            failures: Vec::new(),
            query_interval_ms: None,
            seed: 1,
            failure_prob: 0.0,
            max_retries: 3,
            mode: Mode::Distributed,
            costs: CostModel::default(),
            timeout_ms: 600_000,
        }
    }
}

impl WorkloadSpec {
    pub fn new(n_tasks: u64, mean_task_ms: u64, workers: u32, threads: u32) -> Self {
        WorkloadSpec {
            n_tasks,
            mean_task_ms,
            workers,
            threads,
            ..WorkloadSpec::default()
        }
    }

    pub fn validate(&self) -> StoreResult<()> {
        if self.n_activities == 0 {
            return Err(StoreError::Config("n_activities must be >= 1".into()));
        }
        if self.n_tasks < self.n_activities as u64 {
            return Err(StoreError::Config(format!(
                "n_tasks ({}) must be at least n_activities ({})",
                self.n_tasks, self.n_activities
            )));
        }
        if self.workers == 0 || self.threads == 0 || self.data_nodes == 0 {
            return Err(StoreError::Config("workers, threads and data_nodes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn input_count(&self) -> u64 {
        self.n_tasks.div_ceil(self.n_activities as u64)
    }

    pub fn connector_count(&self) -> u32 {
        if self.connectors == 0 {
            self.workers
        } else {
            self.connectors
        }
    }

    fn operator(&self, i: usize) -> Operator {
        self.operators.get(i).copied().unwrap_or(Operator::Map)
    }

    /// Tasks the run will create when every activity is MAP.
    pub fn expected_tasks(&self) -> u64 {
        self.input_count() * self.n_activities as u64
    }
}

fn activity_name(i: usize) -> String {
    RISERS_ACTIVITIES
        .get(i)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("Activity {}", i + 1))
}

fn output_schema(i: usize) -> Vec<String> {
    let mut s: Vec<&str> = vec!["a", "b", "c"];
    match i {
        1 => s.extend(["cx", "cy", "cz", "raw_file_path", "size_bytes"]),
        3 => s.push("fl"),
        _ => s.extend(["x", "y"]),
    }
    s.into_iter().map(str::to_string).collect()
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// The workflow (a linear chain) and its input tuples. Inputs carry `a`, `b`
/// and `c` drawn from the seed, plus a pretend raw file.
pub fn generate_workload(spec: &WorkloadSpec) -> (WorkflowSpec, Vec<NewTuple>) {
    let n = spec.n_activities as usize;
    let activities: Vec<ActivitySpec> = (0..n)
        .map(|i| ActivitySpec {
            activity_id: format!("act{}", i + 1),
            name: activity_name(i),
            operator: spec.operator(i),
            command_template: "/run a={a} b={b} c={c}".into(),
            input_schema: vec!["a".into(), "b".into(), "c".into()],
            output_schema: output_schema(i),
            mean_duration_ms: spec.mean_task_ms,
            workspace: None,
        })
        .collect();
    let edges = (1..n)
        .map(|i| (format!("act{i}"), format!("act{}", i + 1)))
        .collect();
    let workflow = WorkflowSpec {
        workflow_id: format!("risers-{}", spec.seed),
        activities,
        edges,
        input_schema: vec!["a".into(), "b".into(), "c".into()],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let inputs = (0..spec.input_count())
        .map(|k| {
            let fields: BTreeMap<String, Scalar> = [
                ("a", round2(rng.gen_range(0.1..3.0))),
                ("b", round2(rng.gen_range(5.0..40.0))),
                ("c", round2(rng.gen_range(5.0..30.0))),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), Scalar::Num(v)))
            .collect();
            NewTuple {
                fields,
                raw_file_path: Some(format!("/data/input/i{}.dat", k + 1)),
                size_bytes: Some(rng.gen_range(10_000..1_000_000)),
            }
        })
        .collect();
    (workflow, inputs)
}

// ---- execution accounting ------------------------------------------------------------

/// Wraps an executor and counts attempts and successful executions per task.
pub struct CountingExecutor {
    inner: Arc<dyn Executor>,
    attempts: Mutex<BTreeMap<TaskId, u32>>,
    successes: Mutex<BTreeMap<TaskId, u32>>,
}

impl CountingExecutor {
    pub fn new(inner: Arc<dyn Executor>) -> Self {
        CountingExecutor {
            inner,
            attempts: Mutex::new(BTreeMap::new()),
            successes: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn attempts(&self) -> BTreeMap<TaskId, u32> {
        self.attempts.lock().clone()
    }

    pub fn successes(&self) -> BTreeMap<TaskId, u32> {
        self.successes.lock().clone()
    }
}

impl Executor for CountingExecutor {
    fn execute(&self, task: &Task, inputs: &[DomainTuple], activity: &ActivitySpec) -> Option<ExecOutcome> {
        *self.attempts.lock().entry(task.task_id).or_insert(0) += 1;
        let out = self.inner.execute(task, inputs, activity);
        if matches!(&out, Some(o) if o.success) {
            *self.successes.lock().entry(task.task_id).or_insert(0) += 1;
        }
        out
    }
}

// ---- centralized master ---------------------------------------------------------------

enum MasterMsg {
    Call(Request, Sender<StoreResult<Response>>),
    /// The extra acknowledgement round trip before a completion commits.
    Ack(Sender<StoreResult<Response>>),
}

/// The master of the centralized mode: one thread, one store connection,
/// requests served strictly in arrival order.
pub struct Master {
    tx: Sender<MasterMsg>,
    handle: Option<JoinHandle<()>>,
    alive: Arc<AtomicBool>,
}

impl Master {
    /// Starts the master. `db_hop` is paid per request on the master's own
    /// connection to the store.
    pub fn start(store: Arc<Store>, db_hop: Duration) -> Master {
        let (tx, rx): (Sender<MasterMsg>, Receiver<MasterMsg>) = unbounded();
        let alive = Arc::new(AtomicBool::new(true));
        let flag = alive.clone();
        let handle = std::thread::Builder::new()
            .name("master".into())
            .spawn(move || {
                for msg in rx.iter() {
                    if !flag.load(Ordering::SeqCst) {
                        break;
                    }
                    match msg {
                        MasterMsg::Call(req, reply) => {
                            if !db_hop.is_zero() {
                                std::thread::sleep(db_hop);
                            }
                            let _ = reply.send(store.call(req));
                        }
                        MasterMsg::Ack(reply) => {
                            let _ = reply.send(Ok(Response::Unit));
                        }
                    }
                }
            })
            .expect("spawn master");
        Master {
            tx,
            handle: Some(handle),
            alive,
        }
    }

    /// A client whose requests travel `hop` to reach the master.
    pub fn client(&self, hop: Duration) -> MasterClient {
        MasterClient {
            tx: self.tx.clone(),
            hop,
        }
    }

    pub fn kill(&self) {
        self.alive.store(false, Ordering::SeqCst);
    }
}

impl Drop for Master {
    fn drop(&mut self) {
        self.kill();
        let (tx, _) = unbounded();
        drop(std::mem::replace(&mut self.tx, tx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

pub struct MasterClient {
    tx: Sender<MasterMsg>,
    hop: Duration,
}

impl MasterClient {
    fn round_trip(&self, msg: impl FnOnce(Sender<StoreResult<Response>>) -> MasterMsg) -> StoreResult<Response> {
        if !self.hop.is_zero() {
            std::thread::sleep(self.hop);
        }
        let (tx, rx) = bounded(1);
        self.tx
            .send(msg(tx))
            .map_err(|_| StoreError::Unavailable("master is down".into()))?;
        rx.recv().map_err(|_| StoreError::Unavailable("master is down".into()))?
    }
}

impl StoreApi for MasterClient {
    fn call(&self, req: Request) -> StoreResult<Response> {
        if matches!(req, Request::CompleteTask { .. }) {
            self.round_trip(MasterMsg::Ack)?;
        }
        self.round_trip(|tx| MasterMsg::Call(req, tx))
    }
}

// ---- runs -----------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub elapsed_ms: f64,
    /// Per-node sums of caller-side store-access time.
    pub node_access_ms: BTreeMap<String, f64>,
    /// Largest per-node sum.
    pub access_ms_maxsum: f64,
    /// `access_ms_maxsum / elapsed_ms`.
    pub access_fraction: f64,
    pub category_ms: BTreeMap<AccessCategory, f64>,
    pub category_calls: BTreeMap<AccessCategory, u64>,
    /// Percent of all access time per category.
    pub breakdown_pct: BTreeMap<AccessCategory, f64>,
    pub status: StatusCounts,
    pub throughput_tps: f64,
    pub max_single_access_ms: f64,
    pub queries_run: u64,
}

impl MetricsReport {
    pub fn largest_category(&self) -> Option<AccessCategory> {
        self.category_ms
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(c, _)| *c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub fault: Fault,
    pub at_ms: u64,
    pub finished_before: u64,
    pub error: Option<String>,
    pub action: Option<SteeringAction>,
    /// Table contents just before and just after a data-node kill.
    #[serde(skip)]
    pub dumps: Option<(TableDump, TableDump)>,
}

pub struct RunReport {
    pub spec: WorkloadSpec,
    pub workflow: WorkflowSpec,
    pub metrics: MetricsReport,
    pub tasks: Vec<Task>,
    /// Successful executions per task.
    pub executions: BTreeMap<TaskId, u32>,
    pub attempts: BTreeMap<TaskId, u32>,
    pub supervisor: SupervisorOutcome,
    pub standby: SupervisorOutcome,
    pub workers: Vec<StoreResult<WorkerStats>>,
    pub injections: Vec<InjectionRecord>,
    pub store: Arc<Store>,
    /// `None` when the run completed; otherwise why it did not.
    pub failure: Option<String>,
}

impl RunReport {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn all_finished(&self) -> bool {
        !self.tasks.is_empty() && self.tasks.iter().all(|t| t.status == TaskStatus::Finished)
    }

    /// Tasks whose successful execution count is not exactly one.
    pub fn execution_anomalies(&self) -> Vec<(TaskId, u32)> {
        self.tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Finished)
            .map(|t| (t.task_id, self.executions.get(&t.task_id).copied().unwrap_or(0)))
            .filter(|(_, n)| *n != 1)
            .collect()
    }

    /// `(activity, command line, status)` of every task, sorted: the final
    /// task set independent of id assignment order.
    pub fn task_set(&self) -> Vec<(String, String, TaskStatus)> {
        let mut v: Vec<_> = self
            .tasks
            .iter()
            .map(|t| (t.activity_id.clone(), t.command_line.clone(), t.status))
            .collect();
        v.sort();
        v
    }
}

/// Checks that every row in `pre` survives in `post`: tuples and links
/// unchanged, tasks present with a status at least as advanced.
pub fn committed_rows_preserved(pre: &TableDump, post: &TableDump) -> Result<(), String> {
    let rank = |s: TaskStatus| match s {
        TaskStatus::Ready => 0,
        TaskStatus::Running => 1,
        TaskStatus::Finished | TaskStatus::Aborted => 2,
    };
    let post_tasks: BTreeMap<TaskId, &Task> = post.tasks.iter().map(|t| (t.task_id, t)).collect();
    for t in &pre.tasks {
        let Some(p) = post_tasks.get(&t.task_id) else {
            return Err(format!("task {} lost", t.task_id));
        };
        if t.status.is_terminal() && *p != t {
            return Err(format!("terminal task {} changed", t.task_id));
        }
        if rank(p.status) < rank(t.status) && p.failure_trials == t.failure_trials {
            return Err(format!("task {} went back from {} to {}", t.task_id, t.status, p.status));
        }
    }
    let post_tuples: BTreeSet<String> = post.tuples.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
    for t in &pre.tuples {
        if !post_tuples.contains(&serde_json::to_string(t).unwrap()) {
            return Err(format!("tuple {} lost or changed", t.tuple_id));
        }
    }
    let post_links: BTreeSet<_> = post.links.iter().map(|l| (l.link_id, l.kind, l.task_id, l.tuple_id)).collect();
    for l in &pre.links {
        if !post_links.contains(&(l.link_id, l.kind, l.task_id, l.tuple_id)) {
            return Err(format!("link {} lost or changed", l.link_id));
        }
    }
    Ok(())
}

fn ms(d: u64) -> Duration {
    Duration::from_millis(d)
}

struct Roles {
    worker_clients: Vec<Arc<dyn StoreApi>>,
    supervisor_client: Arc<dyn StoreApi>,
    standby_client: Arc<dyn StoreApi>,
    query_client: Arc<dyn StoreApi>,
    connectors: Vec<Arc<Connector>>,
    master: Option<Master>,
    /// Worker id each worker claims with.
    claim_ids: Vec<u32>,
}

fn build_roles(spec: &WorkloadSpec, store: &Arc<Store>, timer: &Arc<AccessTimer>) -> Roles {
    let hop = Duration::from_micros(spec.costs.hop_us);
    let timed = |inner: Arc<dyn StoreApi>, node: &str| -> Arc<dyn StoreApi> {
        Arc::new(TimedClient::new(inner, node, timer.clone()))
    };
    match spec.mode {
        Mode::Distributed => {
            let c = spec.connector_count();
            let topo = ClusterTopology::single_machine(spec.workers, spec.data_nodes, c, spec.threads);
            let connectors: Vec<Arc<Connector>> = (1..=c)
                .map(|i| Arc::new(Connector::with_hop(i, store.clone(), hop)))
                .collect();
            let map = distribute(&topo.workers(), &topo.connectors());
            let route = |id: u32| -> (u32, Arc<dyn StoreApi>) { (id, connectors[id as usize - 1].clone()) };
            let client_for = |binding: crate::connector::ConnectorBinding| -> Arc<dyn StoreApi> {
                Arc::new(FailoverClient::new(route(binding.primary), binding.secondary.map(route)))
            };
            let worker_clients = (1..=spec.workers)
                .map(|w| timed(client_for(map.binding(w).expect("every worker is bound")), &format!("n{w}")))
                .collect();
            // The supervisor runs alongside worker 1, the standby alongside worker 2.
            let sup_binding = map.binding(1).expect("worker 1 is bound");
            let standby_binding = map.binding(spec.workers.min(2)).expect("bound");
            Roles {
                worker_clients,
                supervisor_client: timed(client_for(sup_binding), "n1"),
                standby_client: timed(client_for(standby_binding), &format!("n{}", spec.workers.min(2))),
                query_client: timed(client_for(sup_binding), "client"),
                connectors,
                master: None,
                claim_ids: (1..=spec.workers).collect(),
            }
        }
        Mode::Centralized => {
            let master = Master::start(store.clone(), hop);
            let worker_clients = (1..=spec.workers)
                .map(|w| timed(Arc::new(master.client(hop)), &format!("n{w}")))
                .collect();
            Roles {
                worker_clients,
                supervisor_client: timed(Arc::new(master.client(Duration::ZERO)), "master"),
                standby_client: timed(Arc::new(master.client(Duration::ZERO)), "master"),
                query_client: timed(Arc::new(master.client(hop)), "client"),
                connectors: Vec::new(),
                master: Some(master),
                claim_ids: vec![1; spec.workers as usize],
            }
        }
    }
}

struct Fired {
    error: Option<String>,
    action: Option<SteeringAction>,
    dumps: Option<(TableDump, TableDump)>,
}

fn fire(fault: &Fault, roles: &Roles, store: &Store, sup_crash: &AtomicBool) -> Fired {
    let mut out = Fired {
        error: None,
        action: None,
        dumps: None,
    };
    match fault {
        Fault::KillConnector(c) => match roles.connectors.get((*c as usize).wrapping_sub(1)) {
            Some(conn) => conn.kill(),
            None => out.error = Some(format!("no connector {c}")),
        },
        Fault::KillSupervisor => {
            sup_crash.store(true, Ordering::SeqCst);
            if let Some(m) = &roles.master {
                m.kill();
            }
        }
        Fault::KillDataNode(d) => {
            let res = store
                .dump_tables()
                .and_then(|pre| store.kill_data_node(*d).map(|_| pre))
                .and_then(|pre| store.dump_tables().map(|post| (pre, post)));
            match res {
                Ok(dumps) => out.dumps = Some(dumps),
                Err(e) => out.error = Some(e.to_string()),
            }
        }
        Fault::AbandonTasks(_) => {}
        Fault::SteerUpdate {
            activity_id,
            predicate,
            set,
        } => match roles.query_client.steer_update(activity_id, predicate.clone(), set.clone()) {
            Ok(a) => out.action = Some(a),
            Err(e) => out.error = Some(e.to_string()),
        },
        Fault::SteerPrune { activity_id, predicate } => {
            match roles.query_client.steer_prune(activity_id, predicate.clone()) {
                Ok(a) => out.action = Some(a),
                Err(e) => out.error = Some(e.to_string()),
            }
        }
    }
    out
}

/// Access-time metrics for a run that has taken `elapsed_ms` so far.
pub fn metrics_report(timer: &AccessTimer, status: StatusCounts, elapsed_ms: f64, queries_run: u64) -> MetricsReport {
    let report = timer.report();
    let mut category_ms = BTreeMap::new();
    let mut category_calls = BTreeMap::new();
    for (cat, t) in report.category_totals() {
        category_ms.insert(cat, t.ms);
        category_calls.insert(cat, t.calls);
    }
    MetricsReport {
        elapsed_ms,
        node_access_ms: report.nodes.iter().map(|(n, a)| (n.clone(), a.total_ms)).collect(),
        access_ms_maxsum: report.max_sum_ms,
        access_fraction: if elapsed_ms > 0.0 { report.max_sum_ms / elapsed_ms } else { 0.0 },
        breakdown_pct: report.breakdown_pct(),
        category_ms,
        category_calls,
        throughput_tps: if elapsed_ms > 0.0 { status.finished as f64 * 1000.0 / elapsed_ms } else { 0.0 },
        status,
        max_single_access_ms: timer.max_single_ms(),
        queries_run,
    }
}

/// Runs one workload to completion (or timeout) and reports.
pub fn run_workload(spec: &WorkloadSpec) -> StoreResult<RunReport> {
    spec.validate()?;
    let (store_workers, sup_workers) = match spec.mode {
        Mode::Distributed => (spec.workers, spec.workers),
        Mode::Centralized => (1, 1),
    };
    let (data_nodes, replicate) = match spec.mode {
        Mode::Distributed => (spec.data_nodes, spec.replicate),
        Mode::Centralized => (1, false),
    };
    let store = Arc::new(Store::new(
        StoreConfig::new(store_workers, data_nodes, replicate).with_txn_cost_us(spec.costs.txn_us),
    )?);
    let timer = Arc::new(AccessTimer::new());
    let roles = build_roles(spec, &store, &timer);
    let (workflow, inputs) = generate_workload(spec);
    let topology = ClusterTopology::single_machine(spec.workers, spec.data_nodes, spec.connector_count(), spec.threads);
    roles
        .supervisor_client
        .register_workflow(workflow.clone(), Some(topology), inputs)?;
    let started = Instant::now();

    let abandon: Vec<TaskId> = spec
        .failures
        .iter()
        .filter_map(|f| match &f.what {
            Fault::AbandonTasks(ids) => Some(ids.clone()),
            _ => None,
        })
        .flatten()
        .collect();
    let synthetic = SyntheticExecutor::new(spec.seed)
        .with_failure_prob(spec.failure_prob)
        .abandoning(abandon);
    let counting = Arc::new(CountingExecutor::new(Arc::new(synthetic)));

    let sup_cfg = |name: &str| {
        let mut c = SupervisorConfig::new(name, sup_workers, spec.threads);
        c.poll_interval = ms(spec.costs.supervisor_poll_ms);
        c.takeover_timeout = ms(spec.costs.takeover_ms);
        c.lease_floor = ms(spec.costs.lease_floor_ms);
        c.max_retries = spec.max_retries;
        c
    };
    let primary_cfg = sup_cfg("supervisor");
    let standby_cfg = sup_cfg("standby");
    let sup_crash = primary_cfg.crash.clone();
    let stop = Arc::new(AtomicBool::new(false));

    let sup_handle = {
        let client = roles.supervisor_client.clone();
        std::thread::spawn(move || supervisor_loop(client.as_ref(), &primary_cfg))
    };
    let standby_handle = (spec.mode == Mode::Distributed).then(|| {
        let client = roles.standby_client.clone();
        let stop = stop.clone();
        std::thread::spawn(move || standby_loop(client.as_ref(), &standby_cfg, &stop))
    });

    let mut worker_handles = Vec::new();
    for (i, client) in roles.worker_clients.iter().enumerate() {
        let mut cfg = WorkerConfig::new(roles.claim_ids[i], spec.threads)
            .with_backoff(ms(spec.costs.backoff_min_ms), ms(spec.costs.backoff_max_ms));
        cfg.retry_max = spec.max_retries;
        let client = client.clone();
        let exec: Arc<dyn Executor> = counting.clone();
        let stop = stop.clone();
        worker_handles.push(std::thread::spawn(move || worker_loop(client, cfg, exec, stop)));
    }

    let queries_run = Arc::new(AtomicU64::new(0));
    let query_handle = spec.query_interval_ms.map(|interval| {
        let client = roles.query_client.clone();
        let stop = stop.clone();
        let counter = queries_run.clone();
        let mut params = Params::new();
        params.insert("hostname".into(), "node1".into());
        params.insert("workflow".into(), workflow.workflow_id.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                let cycle = Instant::now();
                for q in QueryId::ALL {
                    match query::run_predefined(client.as_ref(), q, &params, None) {
                        Ok(_) => {
                            counter.fetch_add(1, Ordering::SeqCst);
                        }
                        Err(e) => log::warn!("{q} failed: {e}"),
                    }
                }
                let rest = ms(interval).saturating_sub(cycle.elapsed());
                let deadline = Instant::now() + rest;
                while Instant::now() < deadline && !stop.load(Ordering::SeqCst) {
                    std::thread::sleep(ms(5).min(deadline - Instant::now()));
                }
            }
        })
    });

    // Injections and completion watch.
    let mut pending: Vec<&FailureInjection> = spec
        .failures
        .iter()
        .filter(|f| !matches!(f.what, Fault::AbandonTasks(_)))
        .collect();
    let mut injections = Vec::new();
    let deadline = started + ms(spec.timeout_ms);
    let mut failure = None;
    loop {
        if store.completed_at().is_some() {
            break;
        }
        if Instant::now() > deadline {
            failure = Some(format!("timed out after {} ms", spec.timeout_ms));
            break;
        }
        if sup_handle.is_finished() && standby_handle.as_ref().map(|h| h.is_finished()).unwrap_or(true) {
            if store.completed_at().is_none() {
                failure = Some("no supervisor left running".into());
            }
            break;
        }
        if !pending.is_empty() {
            let finished = store.progress().map(|p| p.total.finished).unwrap_or(0);
            let elapsed = started.elapsed().as_millis() as u64;
            let mut i = 0;
            while i < pending.len() {
                let due = match pending[i].when {
                    Trigger::AfterMs(t) => elapsed >= t,
                    Trigger::AfterFinished(n) => finished >= n,
                };
                if due {
                    let inj = pending.remove(i);
                    log::info!("injecting {:?}", inj.what);
                    let fired = fire(&inj.what, &roles, &store, &sup_crash);
                    injections.push(InjectionRecord {
                        fault: inj.what.clone(),
                        at_ms: elapsed,
                        finished_before: finished,
                        error: fired.error,
                        action: fired.action,
                        dumps: fired.dumps,
                    });
                } else {
                    i += 1;
                }
            }
        }
        std::thread::sleep(ms(2));
    }
    let wall_ms = started.elapsed().as_secs_f64() * 1e3;

    stop.store(true, Ordering::SeqCst);
    sup_crash.store(true, Ordering::SeqCst);
    let supervisor = match sup_handle.join() {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => {
            log::warn!("supervisor ended with {e}");
            SupervisorOutcome::default()
        }
        Err(_) => SupervisorOutcome::default(),
    };
    let standby = match standby_handle.map(|h| h.join()) {
        Some(Ok(Ok(o))) => o,
        _ => SupervisorOutcome::default(),
    };
    let workers: Vec<StoreResult<WorkerStats>> = worker_handles
        .into_iter()
        .map(|h| h.join().unwrap_or_else(|_| Err(StoreError::Unavailable("worker panicked".into()))))
        .collect();
    if let Some(h) = query_handle {
        let _ = h.join();
    }
    drop(roles);

    let tasks = store.snapshot_tasks(&Predicate::True)?;
    let elapsed_ms = match (store.started_at(), store.completed_at()) {
        (Some(s), Some(c)) => (c - s) as f64,
        _ => wall_ms,
    };
    let mut status = StatusCounts::default();
    for t in &tasks {
        status.add(t.status, 1);
    }
    let metrics = metrics_report(&timer, status, elapsed_ms, queries_run.load(Ordering::SeqCst));
    Ok(RunReport {
        spec: spec.clone(),
        workflow,
        metrics,
        tasks,
        executions: counting.successes(),
        attempts: counting.attempts(),
        supervisor,
        standby,
        workers,
        injections,
        store,
        failure,
    })
}

// ---- experiments ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Strong,
    Weak,
    WorkloadTasks,
    WorkloadDuration,
    DbOverhead,
    Breakdown,
    QueryOverhead,
    CentralizedVsDistributed,
}

impl std::str::FromStr for ExperimentKind {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| StoreError::Invalid(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub kind: ExperimentKind,
    pub cells: Vec<WorkloadSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub spec: WorkloadSpec,
    pub metrics: MetricsReport,
    pub ok: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub cells: Vec<CellResult>,
    /// Named derived figures, e.g. `speedup[2]` or `ratio[0]`.
    pub derived: BTreeMap<String, f64>,
    pub ok: bool,
    pub warnings: Vec<String>,
}

impl ExperimentResult {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "kind,mode,n_tasks,mean_task_ms,workers,threads,data_nodes,queries,elapsed_ms,access_ms_maxsum,fraction",
        );
        for c in AccessCategory::ALL {
            out.push_str(&format!(",{}_ms", c.as_str()));
        }
        out.push_str(",ready,running,finished,aborted\n");
        let kind = serde_json::to_value(self.kind).ok().and_then(|v| v.as_str().map(str::to_string));
        for cell in &self.cells {
            let s = &cell.spec;
            let m = &cell.metrics;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.3},{:.3},{:.6}",
                kind.as_deref().unwrap_or(""),
                match s.mode {
                    Mode::Distributed => "distributed",
                    Mode::Centralized => "centralized",
                },
                s.n_tasks,
                s.mean_task_ms,
                s.workers,
                s.threads,
                s.data_nodes,
                s.query_interval_ms.is_some(),
                m.elapsed_ms,
                m.access_ms_maxsum,
                m.access_fraction,
            ));
            for c in AccessCategory::ALL {
                out.push_str(&format!(",{:.3}", m.category_ms.get(&c).copied().unwrap_or(0.0)));
            }
            out.push_str(&format!(
                ",{},{},{},{}\n",
                m.status.ready, m.status.running, m.status.finished, m.status.aborted
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:?}: {} cells, {}\n", self.kind, self.cells.len(), if self.ok { "ok" } else { "FAILED" });
        for (i, c) in self.cells.iter().enumerate() {
            s.push_str(&format!(
                "  [{i}] {:?} {} tasks x {} ms, {}x{} threads: elapsed {:.0} ms, access max-sum {:.0} ms ({:.1}%)\n",
                c.spec.mode,
                c.spec.n_tasks,
                c.spec.mean_task_ms,
                c.spec.workers,
                c.spec.threads,
                c.metrics.elapsed_ms,
                c.metrics.access_ms_maxsum,
                100.0 * c.metrics.access_fraction
            ));
        }
        for (k, v) in &self.derived {
            s.push_str(&format!("  {k} = {v:.4}\n"));
        }
        for w in &self.warnings {
            s.push_str(&format!("  warning: {w}\n"));
        }
        s
    }
}

fn run_cell(spec: &WorkloadSpec) -> StoreResult<CellResult> {
    let r = run_workload(spec)?;
    let injected_aborts =
        spec.failure_prob > 0.0 || spec.failures.iter().any(|f| matches!(f.what, Fault::SteerPrune { .. }));
    let note = match &r.failure {
        Some(f) => Some(f.clone()),
        None if !injected_aborts && !r.all_finished() => Some(format!("non-FINISHED tasks: {:?}", r.metrics.status)),
        None => None,
    };
    Ok(CellResult {
        spec: spec.clone(),
        ok: note.is_none(),
        note,
        metrics: r.metrics,
    })
}

/// Runs every cell of `grid` and derives the figures its kind calls for.
pub fn run_experiment(grid: &ExperimentGrid) -> StoreResult<ExperimentResult> {
    let hw = std::thread::available_parallelism().map(|n| n.get() as u32).unwrap_or(1);
    let mut warnings = Vec::new();
    for (i, c) in grid.cells.iter().enumerate() {
        if c.workers * c.threads > 4 * hw {
            warnings.push(format!(
                "cell {i}: {} worker threads exceed 4x the {hw} hardware threads",
                c.workers * c.threads
            ));
        }
    }
    let mut cells = Vec::new();
    let mut derived = BTreeMap::new();
    match grid.kind {
        ExperimentKind::CentralizedVsDistributed => {
            for (i, spec) in grid.cells.iter().enumerate() {
                let mut d = spec.clone();
                d.mode = Mode::Distributed;
                let mut c = spec.clone();
                c.mode = Mode::Centralized;
                let dr = run_cell(&d)?;
                let cr = run_cell(&c)?;
                if dr.metrics.elapsed_ms > 0.0 {
                    derived.insert(format!("ratio[{i}]"), cr.metrics.elapsed_ms / dr.metrics.elapsed_ms);
                }
                cells.push(dr);
                cells.push(cr);
            }
        }
        ExperimentKind::QueryOverhead => {
            for (i, spec) in grid.cells.iter().enumerate() {
                let mut plain = spec.clone();
                plain.query_interval_ms = None;
                let mut queried = spec.clone();
                queried.query_interval_ms = Some(spec.query_interval_ms.unwrap_or(2_000));
                let p = run_cell(&plain)?;
                let q = run_cell(&queried)?;
                if p.metrics.elapsed_ms > 0.0 {
                    derived.insert(format!("overhead[{i}]"), q.metrics.elapsed_ms / p.metrics.elapsed_ms - 1.0);
                }
                cells.push(p);
                cells.push(q);
            }
        }
        _ => {
            for spec in &grid.cells {
                cells.push(run_cell(spec)?);
            }
        }
    }
    let base = cells.first().map(|c| (c.metrics.elapsed_ms, c.spec.workers * c.spec.threads));
    for (i, c) in cells.iter().enumerate() {
        derived.insert(format!("fraction[{i}]"), c.metrics.access_fraction);
        if let Some((base_ms, base_threads)) = base {
            let threads = c.spec.workers * c.spec.threads;
            match grid.kind {
                ExperimentKind::Strong if c.metrics.elapsed_ms > 0.0 => {
                    derived.insert(format!("speedup[{i}]"), base_ms / c.metrics.elapsed_ms);
                    derived.insert(format!("linear_speedup[{i}]"), threads as f64 / base_threads as f64);
                }
                ExperimentKind::Weak if base_ms > 0.0 => {
                    derived.insert(format!("deviation[{i}]"), c.metrics.elapsed_ms / base_ms - 1.0);
                }
                _ => {}
            }
        }
    }
    if grid.kind == ExperimentKind::Breakdown {
        if let Some(c) = cells.first() {
            if let Some(cat) = c.metrics.largest_category() {
                derived.insert(format!("largest_is_{}", cat.as_str()), 1.0);
            }
        }
    }
    let ok = cells.iter().all(|c| c.ok);
    Ok(ExperimentResult {
        kind: grid.kind,
        cells,
        derived,
        ok,
        warnings,
    })
}
