//! Engine lifecycle behind the CLI verbs and the HTTP service.
//!
//! States advance `INIT -> STORE_UP -> DB_CREATED -> RUNNING -> COMPLETE`;
//! `shutdown` is accepted from any of them. One workflow runs per engine.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use schaladb::connector::{distribute, Connector, FailoverClient, TimedClient};
use schaladb::harness::{metrics_report, MetricsReport};
use schaladb::protocol::TcpServer;
use schaladb::query::{self, Derivation, Params, QueryResult, QueryText, Snapshot};
use schaladb::supervisor::{standby_loop, supervisor_loop, SupervisorConfig};
use schaladb::taskstore::{AccessTimer, NewTuple, Progress};
use schaladb::worker::{worker_loop, Executor, ExternalExecutor, SyntheticExecutor, WorkerConfig};
use schaladb::{
    ClusterTopology, Predicate, Scalar, SteeringAction, Store, StoreApi, StoreClient, StoreConfig, StoreError, Task,
    TaskStatus, WorkflowSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EngineState {
    Init,
    StoreUp,
    DbCreated,
    Running,
    Complete,
    Shutdown,
}

impl fmt::Display for EngineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineState::Init => "INIT",
            EngineState::StoreUp => "STORE_UP",
            EngineState::DbCreated => "DB_CREATED",
            EngineState::Running => "RUNNING",
            EngineState::Complete => "COMPLETE",
            EngineState::Shutdown => "SHUTDOWN",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("store not started (run `schaladb start` first)")]
    NotStarted,
    #[error("database not created (run `schaladb setup --create` first)")]
    NotCreated,
    #[error("engine is {state}: {detail}")]
    WrongState { state: EngineState, detail: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl EngineError {
    /// HTTP status for this error.
    pub fn status(&self) -> u16 {
        match self {
            EngineError::NotStarted | EngineError::NotCreated | EngineError::WrongState { .. } => 409,
            EngineError::NotFound(_) => 404,
            EngineError::BadRequest(_) => 400,
            EngineError::Store(e) => match e {
                StoreError::UnknownActivity(_) | StoreError::UnknownTask(_) => 404,
                StoreError::DatabaseNotCreated => 409,
                StoreError::Unavailable(_)
                | StoreError::ConnectorDown(_)
                | StoreError::PartitionUnavailable(_)
                | StoreError::StaleRoute { .. }
                | StoreError::Protocol(_)
                | StoreError::LeaseLost(_)
                | StoreError::CursorConflict { .. } => 500,
                _ => 400,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::NotStarted => "not_started",
            EngineError::NotCreated => "not_created",
            EngineError::WrongState { .. } => "wrong_state",
            EngineError::NotFound(_) => "not_found",
            EngineError::BadRequest(_) => "bad_request",
            EngineError::Store(_) => "store",
        }
    }
}

pub type EngineResult<T> = Result<T, EngineError>;

/// Knobs that are not part of the topology file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOptions {
    /// Simulated service time per store transaction; zero in normal use.
    pub txn_cost_us: u64,
    pub supervisor_poll_ms: u64,
    pub takeover_ms: u64,
    pub max_retries: u32,
    pub seed: u64,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions {
            txn_cost_us: 0,
            supervisor_poll_ms: 250,
            takeover_ms: 2_000,
            max_retries: 3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    /// Sleeps for the activity's mean duration and prints computed outputs.
    #[default]
    Synthetic,
    /// Runs each task's command line through the shell.
    External,
}

/// Body of a run request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRequest {
    pub workflow: WorkflowSpec,
    #[serde(default)]
    pub inputs: Vec<Value>,
    #[serde(default)]
    pub executor: ExecutorKind,
}

/// Accepts either `{"fields": {...}, ...}` rows or bare field maps.
pub fn parse_inputs(rows: &[Value]) -> EngineResult<Vec<NewTuple>> {
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let parsed = if row.get("fields").is_some() {
                serde_json::from_value::<NewTuple>(row.clone())
            } else {
                serde_json::from_value::<BTreeMap<String, Scalar>>(row.clone()).map(NewTuple::from_fields)
            };
            parsed.map_err(|e| EngineError::BadRequest(format!("input {i}: {e}")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatusReport {
    pub state: EngineState,
    pub workflow_id: Option<String>,
    pub topology: ClusterTopology,
    pub warnings: Vec<String>,
    pub counts: BTreeMap<String, u64>,
    pub per_worker: BTreeMap<u32, BTreeMap<String, u64>>,
    pub per_activity: BTreeMap<String, BTreeMap<String, u64>>,
    pub total: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPageQuery {
    pub status: Option<String>,
    pub activity: Option<String>,
    pub limit: Option<usize>,
    pub after_id: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskPage {
    pub tasks: Vec<Task>,
    /// Cursor for the next page; `None` when this page is the last.
    pub next_after_id: Option<u64>,
}

pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerKind {
    Update,
    Prune,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerRequest {
    pub kind: SteerKind,
    pub activity: String,
    #[serde(rename = "where")]
    pub predicate: String,
    #[serde(default)]
    pub set: BTreeMap<String, Scalar>,
}

struct RunThreads {
    stop: Arc<AtomicBool>,
    crash: Vec<Arc<AtomicBool>>,
    handles: Vec<JoinHandle<()>>,
}

impl RunThreads {
    fn stop_and_join(self) {
        self.stop.store(true, Ordering::SeqCst);
        for c in &self.crash {
            c.store(true, Ordering::SeqCst);
        }
        for h in self.handles {
            let _ = h.join();
        }
    }
}

struct Inner {
    state: EngineState,
    store: Option<Arc<Store>>,
    client: Option<Arc<dyn StoreApi>>,
    supervisor_client: Option<Arc<dyn StoreApi>>,
    standby_client: Option<Arc<dyn StoreApi>>,
    worker_clients: Vec<Arc<dyn StoreApi>>,
    servers: Vec<TcpServer>,
    warnings: Vec<String>,
    workflow_id: Option<String>,
    run: Option<RunThreads>,
    started: Option<Instant>,
    elapsed_ms: Option<f64>,
}

struct Shared {
    topology: ClusterTopology,
    options: EngineOptions,
    timer: Arc<AccessTimer>,
    inner: Mutex<Inner>,
    closed: AtomicBool,
}

/// Cheap to clone; all clones drive the same engine.
#[derive(Clone)]
pub struct EngineHandle {
    shared: Arc<Shared>,
}

impl EngineHandle {
    pub fn new(topology: ClusterTopology, options: EngineOptions) -> Self {
        EngineHandle {
            shared: Arc::new(Shared {
                topology,
                options,
                timer: Arc::new(AccessTimer::new()),
                inner: Mutex::new(Inner {
                    state: EngineState::Init,
                    store: None,
                    client: None,
                    supervisor_client: None,
                    standby_client: None,
                    worker_clients: Vec::new(),
                    servers: Vec::new(),
                    warnings: Vec::new(),
                    workflow_id: None,
                    run: None,
                    started: None,
                    elapsed_ms: None,
                }),
                closed: AtomicBool::new(false),
            }),
        }
    }

    /// Wraps an already populated store, e.g. a checkpoint or a fixture. The
    /// state follows from what the store holds.
    pub fn attach(store: Arc<Store>, topology: ClusterTopology) -> Self {
        let engine = EngineHandle::new(topology, EngineOptions::default());
        {
            let mut inner = engine.shared.inner.lock();
            let client: Arc<dyn StoreApi> = store.clone();
            inner.client = Some(client.clone());
            inner.supervisor_client = Some(client.clone());
            inner.standby_client = Some(client);
            inner.workflow_id = store.workflow().map(|w| w.workflow_id);
            inner.state = match (&inner.workflow_id, store.completed_at()) {
                (None, _) => EngineState::DbCreated,
                (Some(_), None) => EngineState::Running,
                (Some(_), Some(_)) => EngineState::Complete,
            };
            inner.store = Some(store);
        }
        engine
    }

    pub fn state(&self) -> EngineState {
        self.shared.inner.lock().state
    }

    pub fn topology(&self) -> &ClusterTopology {
        &self.shared.topology
    }

    /// True once `shutdown` has run.
    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    pub fn store(&self) -> Option<Arc<Store>> {
        self.shared.inner.lock().store.clone()
    }

    fn client(&self) -> EngineResult<Arc<dyn StoreApi>> {
        let inner = self.shared.inner.lock();
        match inner.state {
            EngineState::Init => Err(EngineError::NotStarted),
            EngineState::StoreUp => Err(EngineError::NotCreated),
            EngineState::Shutdown => Err(wrong(EngineState::Shutdown, "engine is shut down")),
            _ => inner.client.clone().ok_or(EngineError::NotStarted),
        }
    }

    /// Launches data nodes and connectors per the topology.
    pub fn start(&self) -> EngineResult<()> {
        let mut inner = self.shared.inner.lock();
        if inner.state != EngineState::Init {
            return Err(wrong(inner.state, "store already started"));
        }
        let topo = &self.shared.topology;
        let mut warnings = topo.validate().map_err(EngineError::BadRequest)?;
        let (w, d, c) = (topo.worker_count(), topo.data_node_count(), topo.connector_count());
        let store = Arc::new(Store::new(
            StoreConfig::new(w, d, topo.replicate).with_txn_cost_us(self.shared.options.txn_cost_us),
        )?);
        warnings.extend(store.warnings().iter().cloned());

        let mut routes: Vec<Arc<dyn StoreApi>> = Vec::new();
        for i in 1..=c {
            let connector: Arc<dyn StoreApi> = Arc::new(Connector::new(i, store.clone()));
            match topo.connector_endpoint(i) {
                Some((_, port)) => {
                    let server = TcpServer::bind(("127.0.0.1", port), connector)
                        .map_err(|e| StoreError::Unavailable(format!("connector c{i} on port {port}: {e}")))?;
                    let client = schaladb::protocol::TcpClient::new(server.addr());
                    inner.servers.push(server);
                    routes.push(Arc::new(client));
                }
                None => routes.push(connector),
            }
        }
        let map = distribute(&topo.workers(), &topo.connectors());
        let timer = &self.shared.timer;
        let client_for = |worker: u32, node: &str| -> EngineResult<Arc<dyn StoreApi>> {
            let binding = map
                .binding(worker)
                .ok_or_else(|| EngineError::BadRequest(format!("worker {worker} has no connector")))?;
            let route = |id: u32| (id, routes[id as usize - 1].clone());
            let failover: Arc<dyn StoreApi> =
                Arc::new(FailoverClient::new(route(binding.primary), binding.secondary.map(route)));
            Ok(Arc::new(TimedClient::new(failover, node, timer.clone())))
        };
        let workers = topo.workers();
        inner.worker_clients = workers
            .iter()
            .map(|(i, node)| client_for(*i, node))
            .collect::<EngineResult<_>>()?;
        let first = workers[0].0;
        let second = workers.get(1).map(|w| w.0).unwrap_or(first);
        inner.supervisor_client = Some(client_for(first, "supervisor")?);
        inner.standby_client = Some(client_for(second, "standby")?);
        inner.client = Some(client_for(first, "client")?);
        inner.store = Some(store);
        inner.warnings = warnings;
        inner.state = EngineState::StoreUp;
        Ok(())
    }

    /// Initializes the (empty) tables.
    pub fn setup_create(&self) -> EngineResult<()> {
        let mut inner = self.shared.inner.lock();
        match inner.state {
            EngineState::Init => Err(EngineError::NotStarted),
            EngineState::StoreUp => {
                inner.state = EngineState::DbCreated;
                Ok(())
            }
            s => Err(wrong(s, "database already created")),
        }
    }

    /// Registers the workflow and its inputs, then launches the supervisor
    /// pair and the workers. Returns without waiting for completion.
    pub fn run(&self, req: RunRequest) -> EngineResult<()> {
        let inputs = parse_inputs(&req.inputs)?;
        let report = req.workflow.validate();
        if !report.is_ok() {
            return Err(EngineError::BadRequest(report.errors.join("; ")));
        }
        let mut inner = self.shared.inner.lock();
        match inner.state {
            EngineState::Init => return Err(EngineError::NotStarted),
            EngineState::StoreUp => return Err(EngineError::NotCreated),
            EngineState::DbCreated => {}
            s => return Err(wrong(s, "a workflow has already run on this engine")),
        }
        let opts = &self.shared.options;
        let topo = &self.shared.topology;
        let sup_client = inner.supervisor_client.clone().ok_or(EngineError::NotStarted)?;
        let standby_client = inner.standby_client.clone().ok_or(EngineError::NotStarted)?;
        sup_client.register_workflow(req.workflow.clone(), Some(topo.clone()), inputs)?;

        let stop = Arc::new(AtomicBool::new(false));
        let sup_cfg = |name: &str| {
            let mut c = SupervisorConfig::new(name, topo.worker_count(), topo.threads_per_worker);
            c.poll_interval = Duration::from_millis(opts.supervisor_poll_ms);
            c.takeover_timeout = Duration::from_millis(opts.takeover_ms);
            c.max_retries = opts.max_retries;
            c
        };
        let primary = sup_cfg("supervisor");
        let standby = sup_cfg("standby");
        let crash = vec![primary.crash.clone(), standby.crash.clone()];
        let mut handles = Vec::new();
        handles.push(std::thread::spawn(move || {
            if let Err(e) = supervisor_loop(sup_client.as_ref(), &primary) {
                log::warn!("supervisor ended: {e}");
            }
        }));
        {
            let stop = stop.clone();
            handles.push(std::thread::spawn(move || {
                if let Err(e) = standby_loop(standby_client.as_ref(), &standby, &stop) {
                    log::warn!("standby ended: {e}");
                }
            }));
        }
        let exec: Arc<dyn Executor> = match req.executor {
            ExecutorKind::Synthetic => Arc::new(SyntheticExecutor::new(opts.seed)),
            ExecutorKind::External => Arc::new(ExternalExecutor),
        };
        for ((worker_id, _), client) in topo.workers().into_iter().zip(inner.worker_clients.clone()) {
            let mut cfg = WorkerConfig::new(worker_id, topo.threads_per_worker);
            cfg.retry_max = opts.max_retries;
            let exec = exec.clone();
            let stop = stop.clone();
            handles.push(std::thread::spawn(move || {
                if let Err(e) = worker_loop(client, cfg, exec, stop) {
                    log::warn!("worker {worker_id} ended: {e}");
                }
            }));
        }
        inner.run = Some(RunThreads { stop, crash, handles });
        inner.workflow_id = Some(req.workflow.workflow_id.clone());
        inner.started = Some(Instant::now());
        inner.state = EngineState::Running;
        drop(inner);

        let engine = self.clone();
        std::thread::spawn(move || engine.watch_completion());
        Ok(())
    }

    fn watch_completion(&self) {
        loop {
            std::thread::sleep(Duration::from_millis(20));
            let mut inner = self.shared.inner.lock();
            if inner.state != EngineState::Running {
                return;
            }
            let done = inner.store.as_ref().and_then(|s| s.completed_at()).is_some();
            if done {
                inner.elapsed_ms = inner.started.map(|s| s.elapsed().as_secs_f64() * 1e3);
                inner.state = EngineState::Complete;
                let run = inner.run.take();
                drop(inner);
                if let Some(run) = run {
                    run.stop_and_join();
                }
                log::info!("workflow complete");
                return;
            }
        }
    }

    pub fn status(&self) -> EngineResult<StatusReport> {
        let (state, workflow_id, warnings) = {
            let inner = self.shared.inner.lock();
            (inner.state, inner.workflow_id.clone(), inner.warnings.clone())
        };
        let progress = match self.client() {
            Ok(c) => c.progress()?,
            Err(_) => Progress::default(),
        };
        let counts = |s: &schaladb::taskstore::StatusCounts| -> BTreeMap<String, u64> {
            TaskStatus::ALL.iter().map(|st| (st.as_str().to_string(), s.get(*st))).collect()
        };
        Ok(StatusReport {
            state,
            workflow_id,
            topology: self.shared.topology.clone(),
            warnings,
            counts: counts(&progress.total),
            per_worker: progress.by_worker.iter().map(|(w, c)| (*w, counts(c))).collect(),
            per_activity: progress.by_activity.iter().map(|(a, c)| (a.clone(), counts(c))).collect(),
            total: progress.total.total(),
        })
    }

    /// One page of work-queue rows in task id order.
    pub fn tasks(&self, q: &TaskPageQuery) -> EngineResult<TaskPage> {
        let client = self.client()?;
        let mut pred = Predicate::True;
        if let Some(s) = &q.status {
            let st = TaskStatus::parse(s).ok_or_else(|| EngineError::BadRequest(format!("unknown status {s}")))?;
            pred = pred.and(Predicate::eq("status", st.as_str()));
        }
        if let Some(a) = &q.activity {
            pred = pred.and(Predicate::eq("activity_id", a.as_str()));
        }
        let after = q.after_id.unwrap_or(0);
        pred = pred.and(Predicate::cmp("task_id", schaladb::predicate::CmpOp::Gt, after as i64));
        let limit = q.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
        let mut tasks = client.tasks(pred)?;
        tasks.sort_by_key(|t| t.task_id);
        let more = tasks.len() > limit;
        tasks.truncate(limit);
        let next_after_id = if more { tasks.last().map(|t| t.task_id) } else { None };
        Ok(TaskPage { tasks, next_after_id })
    }

    /// Runs a predefined query, a JSON plan or a `SELECT` statement.
    pub fn query(&self, text: &QueryText, params: &Params, now: Option<u64>) -> EngineResult<QueryResult> {
        let client = self.client()?;
        Ok(query::run_text(client.as_ref(), text, params, now)?)
    }

    pub fn steer(&self, req: &SteerRequest) -> EngineResult<SteeringAction> {
        let client = self.client()?;
        let workflow = client.metadata()?.workflow.ok_or(EngineError::NotCreated)?;
        if workflow.activity(&req.activity).is_none() {
            return Err(EngineError::NotFound(format!("activity {}", req.activity)));
        }
        let pred = Predicate::parse(&req.predicate).map_err(EngineError::BadRequest)?;
        let action = match req.kind {
            SteerKind::Update => {
                if req.set.is_empty() {
                    return Err(EngineError::BadRequest("update needs at least one assignment".into()));
                }
                client.steer_update(&req.activity, pred, req.set.clone())?
            }
            SteerKind::Prune => client.steer_prune(&req.activity, pred)?,
        };
        Ok(action)
    }

    /// Access-time metrics gathered so far.
    pub fn metrics(&self) -> EngineResult<MetricsReport> {
        let client = self.client()?;
        let total = client.progress()?.total;
        let elapsed = {
            let inner = self.shared.inner.lock();
            inner
                .elapsed_ms
                .or_else(|| inner.started.map(|s| s.elapsed().as_secs_f64() * 1e3))
                .unwrap_or(0.0)
        };
        Ok(metrics_report(&self.shared.timer, total, elapsed, 0))
    }

    pub fn provenance(&self, tuple_id: u64) -> EngineResult<Derivation> {
        let client = self.client()?;
        let snap = Snapshot::load(client.as_ref(), None)?;
        if !snap.tuples.iter().any(|t| t.tuple_id == tuple_id) {
            return Err(EngineError::NotFound(format!("tuple {tuple_id}")));
        }
        Ok(query::derivation(&snap, tuple_id)?)
    }

    /// Stops workers, supervisors and connector listeners. Always succeeds.
    pub fn shutdown(&self) {
        let (run, servers) = {
            let mut inner = self.shared.inner.lock();
            inner.state = EngineState::Shutdown;
            (inner.run.take(), std::mem::take(&mut inner.servers))
        };
        if let Some(run) = run {
            run.stop_and_join();
        }
        drop(servers);
        self.shared.closed.store(true, Ordering::SeqCst);
    }
}

fn wrong(state: EngineState, detail: &str) -> EngineError {
    EngineError::WrongState {
        state,
        detail: detail.to_string(),
    }
}
