//! Store protocol: typed requests and responses, the newline-delimited JSON
//! envelope, and the TCP server and client.
//!
//! On the wire a request is `{"op": "...", "req_id": n, "payload": {...}}` and
//! a response is `{"req_id": n, "ok": true, "result": ...}` or
//! `{"req_id": n, "ok": false, "error": {"kind": "...", "detail": ...}}`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{StoreError, StoreResult};
use crate::model::{ClusterTopology, DomainTuple, Millis, Scalar, SteeringAction, Task, TaskId, TaskStatus, TupleId, WorkflowSpec};
use crate::predicate::Predicate;
use crate::taskstore::{
    AccessCategory, CompleteAck, GenerateRequest, NewTuple, PartitionPlacement, PendingInputs, Progress, Rows,
    Store, SupervisorLease, Table, TableDump,
};

fn default_filter() -> Predicate {
    Predicate::True
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "payload", rename_all = "snake_case")]
pub enum Request {
    Ping {},
    RegisterWorkflow {
        workflow: WorkflowSpec,
        #[serde(default)]
        topology: Option<ClusterTopology>,
        #[serde(default)]
        inputs: Vec<NewTuple>,
    },
    InsertTasks {
        tasks: Vec<Task>,
    },
    GenerateTasks(GenerateRequest),
    ClaimReady {
        worker_id: u32,
        max_n: usize,
        #[serde(default)]
        token: Option<u64>,
    },
    FetchInputs {
        task_id: TaskId,
    },
    GetTask {
        task_id: TaskId,
    },
    CompleteTask {
        task_id: TaskId,
        std_out: String,
        #[serde(default)]
        outputs: Vec<NewTuple>,
        #[serde(default)]
        core_slot: Option<u32>,
    },
    FailTask {
        task_id: TaskId,
        max_retries: u32,
    },
    Snapshot {
        table: Table,
        #[serde(default = "default_filter")]
        filter: Predicate,
    },
    Progress {},
    PendingInputs {
        activity_id: String,
    },
    AcquireLease {
        candidate: String,
        expected_epoch: u64,
    },
    Heartbeat {
        holder: String,
        epoch: u64,
    },
    MarkComplete {
        holder: String,
        epoch: u64,
    },
    SteerUpdate {
        activity_id: String,
        predicate: Predicate,
        assignments: BTreeMap<String, Scalar>,
    },
    SteerPrune {
        activity_id: String,
        predicate: Predicate,
    },
    Placements {},
    KillDataNode {
        data_node: u32,
    },
    Dump {},
    Checkpoint {
        dir: PathBuf,
    },
    Now {},
}

/// Shape of the `result` member for each request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    Unit,
    Ids,
    Count,
    Tasks,
    Tuples,
    Task,
    Ack,
    Status,
    Rows,
    Progress,
    Pending,
    Lease,
    Millis,
    Action,
    Placements,
    Dump,
}

impl Request {
    pub fn op(&self) -> &'static str {
        match self {
            Request::Ping {} => "ping",
            Request::RegisterWorkflow { .. } => "register_workflow",
            Request::InsertTasks { .. } => "insert_tasks",
            Request::GenerateTasks(_) => "generate_tasks",
            Request::ClaimReady { .. } => "claim_ready",
            Request::FetchInputs { .. } => "fetch_inputs",
            Request::GetTask { .. } => "get_task",
            Request::CompleteTask { .. } => "complete_task",
            Request::FailTask { .. } => "fail_task",
            Request::Snapshot { .. } => "snapshot",
            Request::Progress {} => "progress",
            Request::PendingInputs { .. } => "pending_inputs",
            Request::AcquireLease { .. } => "acquire_lease",
            Request::Heartbeat { .. } => "heartbeat",
            Request::MarkComplete { .. } => "mark_complete",
            Request::SteerUpdate { .. } => "steer_update",
            Request::SteerPrune { .. } => "steer_prune",
            Request::Placements {} => "placements",
            Request::KillDataNode { .. } => "kill_data_node",
            Request::Dump {} => "dump",
            Request::Checkpoint { .. } => "checkpoint",
            Request::Now {} => "now",
        }
    }

    pub fn response_kind(&self) -> ResponseKind {
        match self {
            Request::Ping {} | Request::Checkpoint { .. } => ResponseKind::Unit,
            Request::RegisterWorkflow { .. } => ResponseKind::Ids,
            Request::InsertTasks { .. } | Request::GenerateTasks(_) => ResponseKind::Count,
            Request::ClaimReady { .. } => ResponseKind::Tasks,
            Request::FetchInputs { .. } => ResponseKind::Tuples,
            Request::GetTask { .. } => ResponseKind::Task,
            Request::CompleteTask { .. } => ResponseKind::Ack,
            Request::FailTask { .. } => ResponseKind::Status,
            Request::Snapshot { .. } => ResponseKind::Rows,
            Request::Progress {} => ResponseKind::Progress,
            Request::PendingInputs { .. } => ResponseKind::Pending,
            Request::AcquireLease { .. } | Request::Heartbeat { .. } => ResponseKind::Lease,
            Request::MarkComplete { .. } | Request::Now {} => ResponseKind::Millis,
            Request::SteerUpdate { .. } | Request::SteerPrune { .. } => ResponseKind::Action,
            Request::Placements {} | Request::KillDataNode { .. } => ResponseKind::Placements,
            Request::Dump {} => ResponseKind::Dump,
        }
    }

    /// Access-timer category the request is booked under.
    pub fn category(&self) -> AccessCategory {
        match self {
            Request::ClaimReady { .. } => AccessCategory::ClaimReady,
            Request::FetchInputs { .. } => AccessCategory::FetchInputs,
            Request::InsertTasks { .. } | Request::GenerateTasks(_) => AccessCategory::InsertTasks,
            Request::CompleteTask { .. } => AccessCategory::CompleteTask,
            Request::FailTask { .. } => AccessCategory::FailTask,
            Request::RegisterWorkflow { .. } | Request::SteerUpdate { .. } => AccessCategory::StoreDomain,
            Request::SteerPrune { .. } => AccessCategory::StoreProv,
            Request::Snapshot { .. } | Request::Progress {} | Request::PendingInputs { .. } => {
                AccessCategory::SnapshotQuery
            }
            _ => AccessCategory::Other,
        }
    }

    /// Worker id whose partition the request targets, when it has one without
    /// a directory lookup.
    pub fn target_worker(&self) -> Option<u32> {
        match self {
            Request::ClaimReady { worker_id, .. } => Some(*worker_id),
            _ => None,
        }
    }

    /// Task whose partition the request targets.
    pub fn target_task(&self) -> Option<TaskId> {
        match self {
            Request::FetchInputs { task_id }
            | Request::GetTask { task_id }
            | Request::CompleteTask { task_id, .. }
            | Request::FailTask { task_id, .. } => Some(*task_id),
            _ => None,
        }
    }

    /// Whether resending after a lost response is safe.
    pub fn is_idempotent(&self) -> bool {
        match self {
            Request::ClaimReady { token, .. } => token.is_some(),
            Request::InsertTasks { .. }
            | Request::RegisterWorkflow { .. }
            | Request::FailTask { .. }
            | Request::AcquireLease { .. }
            | Request::SteerUpdate { .. }
            | Request::SteerPrune { .. } => false,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Response {
    Unit,
    Ids(Vec<TupleId>),
    Count(usize),
    Tasks(Vec<Task>),
    Tuples(Vec<DomainTuple>),
    Task(Box<Task>),
    Ack(CompleteAck),
    Status(TaskStatus),
    Rows(Rows),
    Progress(Progress),
    Pending(PendingInputs),
    Lease(SupervisorLease),
    Millis(Millis),
    Action(Box<SteeringAction>),
    Placements(Vec<PartitionPlacement>),
    Dump(Box<TableDump>),
}

impl Response {
    pub fn to_value(&self) -> Value {
        match self {
            Response::Unit => json!({}),
            other => serde_json::to_value(other).expect("response serializes"),
        }
    }

    pub fn from_value(kind: ResponseKind, v: Value) -> StoreResult<Response> {
        fn de<T: for<'de> Deserialize<'de>>(v: Value) -> StoreResult<T> {
            serde_json::from_value(v).map_err(|e| StoreError::Protocol(format!("bad result: {e}")))
        }
        Ok(match kind {
            ResponseKind::Unit => Response::Unit,
            ResponseKind::Ids => Response::Ids(de(v)?),
            ResponseKind::Count => Response::Count(de(v)?),
            ResponseKind::Tasks => Response::Tasks(de(v)?),
            ResponseKind::Tuples => Response::Tuples(de(v)?),
            ResponseKind::Task => Response::Task(de(v)?),
            ResponseKind::Ack => Response::Ack(de(v)?),
            ResponseKind::Status => Response::Status(de(v)?),
            ResponseKind::Rows => Response::Rows(de(v)?),
            ResponseKind::Progress => Response::Progress(de(v)?),
            ResponseKind::Pending => Response::Pending(de(v)?),
            ResponseKind::Lease => Response::Lease(de(v)?),
            ResponseKind::Millis => Response::Millis(de(v)?),
            ResponseKind::Action => Response::Action(de(v)?),
            ResponseKind::Placements => Response::Placements(de(v)?),
            ResponseKind::Dump => Response::Dump(de(v)?),
        })
    }
}

/// Anything that answers store requests: the store itself, a connector, a
/// remote endpoint, or a decorator around one of those.
pub trait StoreApi: Send + Sync {
    fn call(&self, req: Request) -> StoreResult<Response>;
}

impl<T: StoreApi + ?Sized> StoreApi for Arc<T> {
    fn call(&self, req: Request) -> StoreResult<Response> {
        (**self).call(req)
    }
}

impl<T: StoreApi + ?Sized> StoreApi for Box<T> {
    fn call(&self, req: Request) -> StoreResult<Response> {
        (**self).call(req)
    }
}

impl StoreApi for Store {
    fn call(&self, req: Request) -> StoreResult<Response> {
        Ok(match req {
            Request::Ping {} => Response::Unit,
            Request::RegisterWorkflow {
                workflow,
                topology,
                inputs,
            } => Response::Ids(self.register_workflow(workflow, topology, inputs)?),
            Request::InsertTasks { tasks } => Response::Count(self.insert_tasks(tasks)?),
            Request::GenerateTasks(g) => Response::Count(self.generate_tasks(g)?),
            Request::ClaimReady {
                worker_id,
                max_n,
                token,
            } => Response::Tasks(self.claim_ready(worker_id, max_n, token)?),
            Request::FetchInputs { task_id } => Response::Tuples(self.fetch_task_inputs(task_id)?),
            Request::GetTask { task_id } => Response::Task(Box::new(self.get_task(task_id)?)),
            Request::CompleteTask {
                task_id,
                std_out,
                outputs,
                core_slot,
            } => Response::Ack(self.complete_task(task_id, &std_out, &outputs, core_slot)?),
            Request::FailTask { task_id, max_retries } => Response::Status(self.fail_task(task_id, max_retries)?),
            Request::Snapshot { table, filter } => Response::Rows(self.snapshot(table, &filter)?),
            Request::Progress {} => Response::Progress(self.progress()?),
            Request::PendingInputs { activity_id } => Response::Pending(self.pending_inputs(&activity_id)?),
            Request::AcquireLease {
                candidate,
                expected_epoch,
            } => Response::Lease(self.acquire_lease(&candidate, expected_epoch)?),
            Request::Heartbeat { holder, epoch } => Response::Lease(self.heartbeat(&holder, epoch)?),
            Request::MarkComplete { holder, epoch } => Response::Millis(self.mark_complete(&holder, epoch)?),
            Request::SteerUpdate {
                activity_id,
                predicate,
                assignments,
            } => Response::Action(Box::new(self.steer_update(&activity_id, &predicate, &assignments)?)),
            Request::SteerPrune { activity_id, predicate } => {
                Response::Action(Box::new(self.steer_prune(&activity_id, &predicate)?))
            }
            Request::Placements {} => Response::Placements(self.placements()),
            Request::KillDataNode { data_node } => Response::Placements(self.kill_data_node(data_node)?),
            Request::Dump {} => Response::Dump(Box::new(self.dump_tables()?)),
            Request::Checkpoint { dir } => {
                self.checkpoint(&dir)?;
                Response::Unit
            }
            Request::Now {} => Response::Millis(self.now_ms()),
        })
    }
}

fn unexpected(op: &str, resp: Response) -> StoreError {
    StoreError::Protocol(format!("unexpected response to {op}: {resp:?}"))
}

macro_rules! expect {
    ($self:ident, $req:expr, $pat:pat => $out:expr) => {{
        let req = $req;
        let op = req.op();
        match $self.call(req)? {
            $pat => Ok($out),
            other => Err(unexpected(op, other)),
        }
    }};
}

/// Typed convenience methods over [`StoreApi::call`].
pub trait StoreClient: StoreApi {
    fn ping(&self) -> StoreResult<()> {
        expect!(self, Request::Ping {}, Response::Unit => ())
    }

    fn register_workflow(
        &self,
        workflow: WorkflowSpec,
        topology: Option<ClusterTopology>,
        inputs: Vec<NewTuple>,
    ) -> StoreResult<Vec<TupleId>> {
        expect!(self, Request::RegisterWorkflow { workflow, topology, inputs }, Response::Ids(v) => v)
    }

    fn insert_tasks(&self, tasks: Vec<Task>) -> StoreResult<usize> {
        expect!(self, Request::InsertTasks { tasks }, Response::Count(n) => n)
    }

    fn generate_tasks(&self, req: GenerateRequest) -> StoreResult<usize> {
        expect!(self, Request::GenerateTasks(req), Response::Count(n) => n)
    }

    fn claim_ready(&self, worker_id: u32, max_n: usize, token: Option<u64>) -> StoreResult<Vec<Task>> {
        expect!(self, Request::ClaimReady { worker_id, max_n, token }, Response::Tasks(v) => v)
    }

    fn fetch_inputs(&self, task_id: TaskId) -> StoreResult<Vec<DomainTuple>> {
        expect!(self, Request::FetchInputs { task_id }, Response::Tuples(v) => v)
    }

    fn get_task(&self, task_id: TaskId) -> StoreResult<Task> {
        expect!(self, Request::GetTask { task_id }, Response::Task(t) => *t)
    }

    fn complete_task(
        &self,
        task_id: TaskId,
        std_out: String,
        outputs: Vec<NewTuple>,
        core_slot: Option<u32>,
    ) -> StoreResult<CompleteAck> {
        expect!(self, Request::CompleteTask { task_id, std_out, outputs, core_slot }, Response::Ack(a) => a)
    }

    fn fail_task(&self, task_id: TaskId, max_retries: u32) -> StoreResult<TaskStatus> {
        expect!(self, Request::FailTask { task_id, max_retries }, Response::Status(s) => s)
    }

    fn snapshot(&self, table: Table, filter: Predicate) -> StoreResult<Rows> {
        expect!(self, Request::Snapshot { table, filter }, Response::Rows(r) => r)
    }

    fn tasks(&self, filter: Predicate) -> StoreResult<Vec<Task>> {
        match self.snapshot(Table::WorkQueue, filter)? {
            Rows::WorkQueue(v) => Ok(v),
            other => Err(StoreError::Protocol(format!("expected work_queue rows, got {}", other.len()))),
        }
    }

    fn tuples(&self, filter: Predicate) -> StoreResult<Vec<DomainTuple>> {
        match self.snapshot(Table::DomainTuples, filter)? {
            Rows::DomainTuples(v) => Ok(v),
            _ => Err(StoreError::Protocol("expected domain_tuples rows".into())),
        }
    }

    fn links(&self, filter: Predicate) -> StoreResult<Vec<crate::model::ProvLink>> {
        match self.snapshot(Table::ProvLinks, filter)? {
            Rows::ProvLinks(v) => Ok(v),
            _ => Err(StoreError::Protocol("expected prov_links rows".into())),
        }
    }

    fn metadata(&self) -> StoreResult<crate::taskstore::MetadataView> {
        match self.snapshot(Table::Metadata, Predicate::True)? {
            Rows::Metadata(m) => Ok(*m),
            _ => Err(StoreError::Protocol("expected metadata row".into())),
        }
    }

    fn progress(&self) -> StoreResult<Progress> {
        expect!(self, Request::Progress {}, Response::Progress(p) => p)
    }

    fn pending_inputs(&self, activity_id: &str) -> StoreResult<PendingInputs> {
        expect!(self, Request::PendingInputs { activity_id: activity_id.to_string() }, Response::Pending(p) => p)
    }

    fn acquire_lease(&self, candidate: &str, expected_epoch: u64) -> StoreResult<SupervisorLease> {
        expect!(self, Request::AcquireLease { candidate: candidate.to_string(), expected_epoch }, Response::Lease(l) => l)
    }

    fn heartbeat(&self, holder: &str, epoch: u64) -> StoreResult<SupervisorLease> {
        expect!(self, Request::Heartbeat { holder: holder.to_string(), epoch }, Response::Lease(l) => l)
    }

    fn mark_complete(&self, holder: &str, epoch: u64) -> StoreResult<Millis> {
        expect!(self, Request::MarkComplete { holder: holder.to_string(), epoch }, Response::Millis(m) => m)
    }

    fn steer_update(
        &self,
        activity_id: &str,
        predicate: Predicate,
        assignments: BTreeMap<String, Scalar>,
    ) -> StoreResult<SteeringAction> {
        expect!(self, Request::SteerUpdate { activity_id: activity_id.to_string(), predicate, assignments }, Response::Action(a) => *a)
    }

    fn steer_prune(&self, activity_id: &str, predicate: Predicate) -> StoreResult<SteeringAction> {
        expect!(self, Request::SteerPrune { activity_id: activity_id.to_string(), predicate }, Response::Action(a) => *a)
    }

    fn placements(&self) -> StoreResult<Vec<PartitionPlacement>> {
        expect!(self, Request::Placements {}, Response::Placements(p) => p)
    }

    fn kill_data_node(&self, data_node: u32) -> StoreResult<Vec<PartitionPlacement>> {
        expect!(self, Request::KillDataNode { data_node }, Response::Placements(p) => p)
    }

    fn dump(&self) -> StoreResult<TableDump> {
        expect!(self, Request::Dump {}, Response::Dump(d) => *d)
    }

    fn checkpoint(&self, dir: PathBuf) -> StoreResult<()> {
        expect!(self, Request::Checkpoint { dir }, Response::Unit => ())
    }

    fn now_ms(&self) -> StoreResult<Millis> {
        expect!(self, Request::Now {}, Response::Millis(m) => m)
    }
}

impl<T: StoreApi + ?Sized> StoreClient for T {}

// ---- envelope ------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    op: String,
    req_id: u64,
    #[serde(default)]
    payload: Value,
}

/// Encodes a request as one protocol line (without the trailing newline).
pub fn encode_request(req_id: u64, req: &Request) -> String {
    let mut v = serde_json::to_value(req).expect("request serializes");
    let payload = v.get_mut("payload").map(Value::take).unwrap_or_else(|| json!({}));
    let env = Envelope {
        op: req.op().to_string(),
        req_id,
        payload,
    };
    serde_json::to_string(&env).expect("envelope serializes")
}

/// Decodes one request line. On failure returns the request id (if one could
/// be read) together with the error.
pub fn decode_request(line: &str) -> Result<(u64, Request), (u64, StoreError)> {
    let env: Envelope = serde_json::from_str(line).map_err(|e| {
        let id = serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| v.get("req_id").and_then(Value::as_u64))
            .unwrap_or(0);
        (id, StoreError::Protocol(format!("malformed message: {e}")))
    })?;
    let payload = if env.payload.is_null() { json!({}) } else { env.payload };
    let req: Request = serde_json::from_value(json!({"op": env.op, "payload": payload}))
        .map_err(|e| (env.req_id, StoreError::Protocol(format!("bad {} request: {e}", env.op))))?;
    Ok((env.req_id, req))
}

pub fn encode_response(req_id: u64, result: &StoreResult<Response>) -> String {
    let v = match result {
        Ok(r) => json!({"req_id": req_id, "ok": true, "result": r.to_value()}),
        Err(e) => json!({"req_id": req_id, "ok": false, "error": e}),
    };
    v.to_string()
}

pub fn decode_response(line: &str, kind: ResponseKind) -> StoreResult<(u64, StoreResult<Response>)> {
    let v: Value = serde_json::from_str(line).map_err(|e| StoreError::Protocol(format!("bad response: {e}")))?;
    let req_id = v
        .get("req_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| StoreError::Protocol("response lacks req_id".into()))?;
    let ok = v.get("ok").and_then(Value::as_bool).unwrap_or(false);
    if ok {
        let result = v.get("result").cloned().unwrap_or(Value::Null);
        Ok((req_id, Response::from_value(kind, result)))
    } else {
        let err = v
            .get("error")
            .cloned()
            .and_then(|e| serde_json::from_value::<StoreError>(e).ok())
            .unwrap_or_else(|| StoreError::Protocol("error response without a readable error".into()));
        Ok((req_id, Err(err)))
    }
}

// ---- TCP server ----------------------------------------------------------------

/// A listening protocol endpoint. Dropping it does not stop it; call
/// [`TcpServer::stop`].
pub struct TcpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl TcpServer {
    /// Binds `addr` and serves requests with `handler`, one thread per connection.
    pub fn bind(addr: impl ToSocketAddrs, handler: Arc<dyn StoreApi>) -> std::io::Result<TcpServer> {
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let handle = std::thread::Builder::new()
            .name(format!("serve-{}", local.port()))
            .spawn(move || accept_loop(listener, handler, stop2))?;
        Ok(TcpServer {
            addr: local,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and closes open connections at their next request.
    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, handler: Arc<dyn StoreApi>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let handler = handler.clone();
                let stop = stop.clone();
                let _ = std::thread::Builder::new()
                    .name("conn".into())
                    .spawn(move || serve_connection(stream, handler, stop));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, handler: Arc<dyn StoreApi>, stop: Arc<AtomicBool>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(200)));
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        match reader.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {}
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                // Partial data stays in `line`; keep reading.
                continue;
            }
            Err(_) => return,
        }
        if line.trim().is_empty() {
            line.clear();
            continue;
        }
        let reply = match decode_request(line.trim_end()) {
            Ok((id, req)) => encode_response(id, &handler.call(req)),
            Err((id, e)) => encode_response(id, &Err(e)),
        };
        line.clear();
        if writer.write_all(reply.as_bytes()).is_err() || writer.write_all(b"\n").is_err() {
            return;
        }
    }
}

// ---- TCP client ----------------------------------------------------------------

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Pooled client for a protocol endpoint. Connection errors and timeouts
/// surface as [`StoreError::Unavailable`].
pub struct TcpClient {
    addr: SocketAddr,
    timeout: Duration,
    pool: Mutex<Vec<Conn>>,
    next_id: AtomicU64,
}

impl TcpClient {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

    pub fn new(addr: SocketAddr) -> Self {
        Self::with_timeout(addr, Self::DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(addr: SocketAddr, timeout: Duration) -> Self {
        TcpClient {
            addr,
            timeout,
            pool: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn connect(host: &str, port: u16) -> StoreResult<Self> {
        let addr = (host, port)
            .to_socket_addrs()
            .map_err(|e| StoreError::Unavailable(format!("{host}:{port}: {e}")))?
            .next()
            .ok_or_else(|| StoreError::Unavailable(format!("{host}:{port}: no address")))?;
        Ok(Self::new(addr))
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn open(&self) -> StoreResult<Conn> {
        let unavailable = |e: std::io::Error| StoreError::Unavailable(format!("{}: {e}", self.addr));
        let stream = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(unavailable)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(unavailable)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(unavailable)?;
        let _ = stream.set_nodelay(true);
        let writer = stream.try_clone().map_err(unavailable)?;
        Ok(Conn {
            reader: BufReader::new(stream),
            writer,
        })
    }

    fn roundtrip(&self, conn: &mut Conn, line: &str) -> std::io::Result<String> {
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.write_all(b"\n")?;
        let mut reply = String::new();
        if conn.reader.read_line(&mut reply)? == 0 {
            return Err(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "connection closed"));
        }
        Ok(reply)
    }
}

impl StoreApi for TcpClient {
    fn call(&self, req: Request) -> StoreResult<Response> {
        let req_id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let kind = req.response_kind();
        let line = encode_request(req_id, &req);
        let pooled = self.pool.lock().pop();
        let from_pool = pooled.is_some();
        let mut conn = match pooled {
            Some(c) => c,
            None => self.open()?,
        };
        let reply = match self.roundtrip(&mut conn, &line) {
            Ok(r) => r,
            Err(_) if from_pool && req.is_idempotent() => {
                // The peer may have closed an idle pooled connection; retry
                // once on a fresh one.
                conn = self.open()?;
                self.roundtrip(&mut conn, &line)
                    .map_err(|e| StoreError::Unavailable(format!("{}: {e}", self.addr)))?
            }
            Err(e) => return Err(StoreError::Unavailable(format!("{}: {e}", self.addr))),
        };
        let (id, result) = decode_response(reply.trim_end(), kind)?;
        if id != req_id {
            return Err(StoreError::Protocol(format!("response id {id} does not match request {req_id}")));
        }
        self.pool.lock().push(conn);
        result
    }
}
