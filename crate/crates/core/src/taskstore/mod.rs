//! The in-memory store: W work-queue partitions spread over D data nodes,
//! each mirrored synchronously on one replica.
//!
//! Every mutation of a partition runs under that partition's write lock on the
//! primary copy; the resulting [`WriteSet`] is applied to the replica before the
//! call returns. Reads take the primary's read lock, so a reader sees the last
//! committed state of each partition but no global snapshot across partitions.
//!
//! Lock order: `meta` → `placement` → partition (primary, then replica) →
//! `task_home`/`tuple_home`.

pub mod meta;
pub mod partition;
pub mod placement;
pub mod timer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};
use crate::error::{StoreError, StoreResult};
use crate::model::{
    render_command, ActionId, ClusterTopology, DomainTuple, Millis, ProvKind, ProvLink, Scalar,
    SteeringAction, SteeringKind, Task, TaskId, TaskStatus, TupleId, WorkflowSpec,
};
use crate::predicate::{Predicate, Row};

pub use meta::{CursorAdvance, GenerationCursor, Metadata, MetadataView, SupervisorLease};
pub use partition::{CompleteAck, NewTuple, Partition, WriteSet};
pub use placement::{allocate_partitions, partition_of, PartitionPlacement};
pub use timer::{AccessCategory, AccessReport, AccessTimer};

/// Activity id carried by workflow input tuples.
pub const INPUT_ACTIVITY: &str = "input";

/// Home value in the tuple directory for tuples held in the metadata table.
const META_HOME: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub workers: u32,
    pub data_nodes: u32,
    pub replicate: bool,
    /// Simulated service time of one partition transaction, in microseconds.
    /// Zero disables the cost model.
    #[serde(default)]
    pub txn_cost_us: u64,
}

impl StoreConfig {
    pub fn new(workers: u32, data_nodes: u32, replicate: bool) -> Self {
        StoreConfig {
            workers,
            data_nodes,
            replicate,
            txn_cost_us: 0,
        }
    }

    pub fn with_txn_cost_us(mut self, us: u64) -> Self {
        self.txn_cost_us = us;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    WorkQueue,
    DomainTuples,
    ProvLinks,
    Metadata,
}

impl Table {
    pub const ALL: [Table; 4] = [Table::WorkQueue, Table::DomainTuples, Table::ProvLinks, Table::Metadata];

    pub fn as_str(&self) -> &'static str {
        match self {
            Table::WorkQueue => "work_queue",
            Table::DomainTuples => "domain_tuples",
            Table::ProvLinks => "prov_links",
            Table::Metadata => "metadata",
        }
    }
}

impl FromStr for Table {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Table::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| StoreError::UnknownTable(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "table", content = "rows", rename_all = "snake_case")]
pub enum Rows {
    WorkQueue(Vec<Task>),
    DomainTuples(Vec<DomainTuple>),
    ProvLinks(Vec<ProvLink>),
    Metadata(Box<MetadataView>),
}

impl Rows {
    pub fn len(&self) -> usize {
        match self {
            Rows::WorkQueue(r) => r.len(),
            Rows::DomainTuples(r) => r.len(),
            Rows::ProvLinks(r) => r.len(),
            Rows::Metadata(_) => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub ready: u64,
    pub running: u64,
    pub finished: u64,
    pub aborted: u64,
}

impl StatusCounts {
    pub fn add(&mut self, status: TaskStatus, n: u64) {
        match status {
            TaskStatus::Ready => self.ready += n,
            TaskStatus::Running => self.running += n,
            TaskStatus::Finished => self.finished += n,
            TaskStatus::Aborted => self.aborted += n,
        }
    }

    pub fn get(&self, status: TaskStatus) -> u64 {
        match status {
            TaskStatus::Ready => self.ready,
            TaskStatus::Running => self.running,
            TaskStatus::Finished => self.finished,
            TaskStatus::Aborted => self.aborted,
        }
    }

    pub fn total(&self) -> u64 {
        self.ready + self.running + self.finished + self.aborted
    }

    pub fn active(&self) -> u64 {
        self.ready + self.running
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: StatusCounts,
    pub by_activity: BTreeMap<String, StatusCounts>,
    pub by_worker: BTreeMap<u32, StatusCounts>,
    /// Task-produced output tuples per activity.
    #[serde(default)]
    pub outputs_by_activity: BTreeMap<String, u64>,
}

/// A generated batch, guarded by the supervisor lease epoch and the cursor
/// position it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub holder: String,
    pub epoch: u64,
    pub expected_next_task_id: TaskId,
    pub tasks: Vec<Task>,
    pub advance: CursorAdvance,
}

/// Upstream state the supervisor needs to generate tasks for one activity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PendingInputs {
    /// Upstream tuples not yet turned into tasks of this activity, by id.
    pub tuples: Vec<DomainTuple>,
}

/// Full contents of the three row tables, ordered by id. Used to compare
/// states across failures and runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableDump {
    pub tasks: Vec<Task>,
    pub tuples: Vec<DomainTuple>,
    pub links: Vec<ProvLink>,
}

struct DataNode {
    alive: AtomicBool,
    partitions: RwLock<BTreeMap<u32, Arc<RwLock<Partition>>>>,
}

type PartitionRef = Arc<RwLock<Partition>>;

pub struct Store {
    config: StoreConfig,
    nodes: Vec<DataNode>,
    placement: RwLock<Vec<PartitionPlacement>>,
    meta: Mutex<Metadata>,
    task_home: RwLock<HashMap<TaskId, u32>>,
    tuple_home: RwLock<HashMap<TupleId, u32>>,
    next_tuple: AtomicU64,
    next_link: AtomicU64,
    next_action: AtomicU64,
    clock: Arc<dyn Clock>,
    warnings: Vec<String>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("config", &self.config).finish_non_exhaustive()
    }
}

struct SteerRow<'a> {
    task: &'a Task,
    tuple: &'a DomainTuple,
}

impl Row for SteerRow<'_> {
    fn field(&self, name: &str) -> Option<crate::model::ScalarRef<'_>> {
        match name {
            "activity_id" | "activity" | "status" | "task_id" | "worker_id" | "worker" | "workflow_id" => {
                self.task.field(name)
            }
            _ => self.tuple.field(name).or_else(|| self.task.field(name)),
        }
    }
}

impl Store {
    pub fn new(config: StoreConfig) -> StoreResult<Self> {
        Self::with_clock(config, Arc::new(SystemClock::new()))
    }

    pub fn with_clock(config: StoreConfig, clock: Arc<dyn Clock>) -> StoreResult<Self> {
        let (placements, warnings) =
            allocate_partitions(config.workers, config.data_nodes, config.replicate)?;
        let nodes: Vec<DataNode> = (0..config.data_nodes)
            .map(|_| DataNode {
                alive: AtomicBool::new(true),
                partitions: RwLock::new(BTreeMap::new()),
            })
            .collect();
        for pl in &placements {
            let mut hosts = vec![pl.primary_data_node];
            hosts.extend(pl.replica_data_node);
            for d in hosts {
                nodes[d as usize - 1]
                    .partitions
                    .write()
                    .insert(pl.partition_id, Arc::new(RwLock::new(Partition::new(pl.partition_id))));
            }
        }
        Ok(Store {
            config,
            nodes,
            placement: RwLock::new(placements),
            meta: Mutex::new(Metadata::default()),
            task_home: RwLock::new(HashMap::new()),
            tuple_home: RwLock::new(HashMap::new()),
            next_tuple: AtomicU64::new(1),
            next_link: AtomicU64::new(1),
            next_action: AtomicU64::new(1),
            clock,
            warnings,
        })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now_ms(&self) -> Millis {
        self.clock.now_ms()
    }

    pub fn placements(&self) -> Vec<PartitionPlacement> {
        self.placement.read().clone()
    }

    pub fn node_alive(&self, data_node: u32) -> bool {
        self.nodes
            .get(data_node as usize - 1)
            .is_some_and(|n| n.alive.load(Ordering::SeqCst))
    }

    /// Data node currently serving partition `pid`.
    pub fn primary_of(&self, pid: u32) -> StoreResult<u32> {
        let placement = self.placement.read();
        let pl = placement
            .get(pid.wrapping_sub(1) as usize)
            .ok_or(StoreError::WorkerOutOfRange {
                worker_id: pid,
                workers: self.config.workers,
            })?;
        if self.node_alive(pl.primary_data_node) {
            Ok(pl.primary_data_node)
        } else {
            Err(StoreError::PartitionUnavailable(pid))
        }
    }

    /// Partition holding `task_id`, if the task exists.
    pub fn partition_of_task(&self, task_id: TaskId) -> Option<u32> {
        self.task_home.read().get(&task_id).copied()
    }

    fn copy_on(&self, data_node: u32, pid: u32) -> Option<PartitionRef> {
        let node = self.nodes.get(data_node as usize - 1)?;
        if !node.alive.load(Ordering::SeqCst) {
            return None;
        }
        node.partitions.read().get(&pid).cloned()
    }

    fn simulate_txn(&self) {
        if self.config.txn_cost_us > 0 {
            std::thread::sleep(Duration::from_micros(self.config.txn_cost_us));
        }
    }

    /// Runs one serialized transaction on partition `pid`: `plan` reads the
    /// primary and returns the rows to write, which are then applied to the
    /// primary and its replica before returning.
    fn write_partition<T>(
        &self,
        pid: u32,
        plan: impl FnOnce(&Partition) -> StoreResult<(WriteSet, T)>,
    ) -> StoreResult<T> {
        let placement = self.placement.read();
        let pl = *placement
            .get(pid.wrapping_sub(1) as usize)
            .ok_or(StoreError::PartitionUnavailable(pid))?;
        let primary = self
            .copy_on(pl.primary_data_node, pid)
            .ok_or(StoreError::PartitionUnavailable(pid))?;
        let mut guard = primary.write();
        self.simulate_txn();
        let (ws, out) = plan(&guard)?;
        if ws.is_empty() {
            return Ok(out);
        }
        guard.apply(&ws);
        if let Some(replica) = pl.replica_data_node.and_then(|r| self.copy_on(r, pid)) {
            replica.write().apply(&ws);
        }
        Ok(out)
    }

    /// Reads partition `pid` as a statement of its own: pays one transaction cost.
    fn read_partition<T>(&self, pid: u32, read: impl FnOnce(&Partition) -> T) -> StoreResult<T> {
        self.simulate_txn();
        self.read_within(pid, read)
    }

    /// Reads partition `pid` as part of a statement that already paid its
    /// transaction cost. Multi-partition reads are one statement evaluated in
    /// parallel by the data nodes, so they pay once.
    fn read_within<T>(&self, pid: u32, read: impl FnOnce(&Partition) -> T) -> StoreResult<T> {
        let placement = self.placement.read();
        let pl = *placement
            .get(pid.wrapping_sub(1) as usize)
            .ok_or(StoreError::PartitionUnavailable(pid))?;
        let primary = self
            .copy_on(pl.primary_data_node, pid)
            .ok_or(StoreError::PartitionUnavailable(pid))?;
        drop(placement);
        let guard = primary.read();
        Ok(read(&guard))
    }

    fn partitions(&self) -> std::ops::RangeInclusive<u32> {
        1..=self.config.workers
    }

    // ---- workflow registration -------------------------------------------------

    /// Installs the workflow definition and its input tuples, resetting the
    /// generation cursor. Returns the input tuple ids in order.
    pub fn register_workflow(
        &self,
        workflow: WorkflowSpec,
        topology: Option<ClusterTopology>,
        inputs: Vec<NewTuple>,
    ) -> StoreResult<Vec<TupleId>> {
        let report = workflow.validate();
        if !report.is_ok() {
            return Err(StoreError::Invalid(report.errors.join("; ")));
        }
        if workflow.activity(INPUT_ACTIVITY).is_some() {
            return Err(StoreError::Invalid(format!(
                "activity id {INPUT_ACTIVITY:?} is reserved for workflow inputs"
            )));
        }
        for (i, t) in inputs.iter().enumerate() {
            for f in &workflow.input_schema {
                if !t.fields.contains_key(f) {
                    return Err(StoreError::Invalid(format!("input tuple {i} lacks field {f}")));
                }
            }
        }
        let mut meta = self.meta.lock();
        let now = self.clock.now_ms();
        let mut ids = Vec::with_capacity(inputs.len());
        let mut home = self.tuple_home.write();
        for t in inputs {
            let tuple_id = self.next_tuple.fetch_add(1, Ordering::SeqCst);
            meta.inputs.insert(
                tuple_id,
                DomainTuple {
                    tuple_id,
                    activity_id: INPUT_ACTIVITY.to_string(),
                    produced_by_task: None,
                    fields: t.fields,
                    raw_file_path: t.raw_file_path,
                    size_bytes: t.size_bytes,
                    derived_from: None,
                },
            );
            home.insert(tuple_id, META_HOME);
            ids.push(tuple_id);
        }
        meta.workflow = Some(workflow);
        if topology.is_some() {
            meta.topology = topology;
        }
        meta.started_at = Some(now);
        meta.completed_at = None;
        let next_task_id = meta.cursor.next_task_id;
        meta.cursor = GenerationCursor {
            next_task_id,
            ..GenerationCursor::default()
        };
        Ok(ids)
    }

    pub fn workflow(&self) -> Option<WorkflowSpec> {
        self.meta.lock().workflow.clone()
    }

    pub fn cursor(&self) -> GenerationCursor {
        self.meta.lock().cursor.clone()
    }

    pub fn lease(&self) -> SupervisorLease {
        self.meta.lock().lease.clone()
    }

    pub fn started_at(&self) -> Option<Millis> {
        self.meta.lock().started_at
    }

    pub fn completed_at(&self) -> Option<Millis> {
        self.meta.lock().completed_at
    }

    pub fn steering_log(&self) -> Vec<SteeringAction> {
        self.meta.lock().steering.clone()
    }

    // ---- scheduling ------------------------------------------------------------

    fn check_batch(&self, meta: &Metadata, batch: &[Task]) -> StoreResult<BTreeMap<u32, Vec<Task>>> {
        let workflow = meta.workflow.as_ref();
        let mut seen = BTreeSet::new();
        let home = self.task_home.read();
        let mut groups: BTreeMap<u32, Vec<Task>> = BTreeMap::new();
        for t in batch {
            let pid = partition_of(t.worker_id, self.config.workers)?;
            if !seen.insert(t.task_id) || home.contains_key(&t.task_id) {
                return Err(StoreError::DuplicateTask(t.task_id));
            }
            if workflow.and_then(|w| w.activity(&t.activity_id)).is_none() {
                return Err(StoreError::UnknownActivity(t.activity_id.clone()));
            }
            // Unrenderable tasks enter the queue already ABORTED.
            let ok = t.status == TaskStatus::Ready
                || (t.status == TaskStatus::Aborted && t.start_time.is_none());
            if !ok {
                return Err(StoreError::Invalid(format!(
                    "task {} inserted with status {}",
                    t.task_id, t.status
                )));
            }
            if t.core_slot < 1 {
                return Err(StoreError::Invalid(format!("task {} has core_slot 0", t.task_id)));
            }
            groups.entry(pid).or_default().push(t.clone());
        }
        Ok(groups)
    }

    fn insert_groups(&self, groups: BTreeMap<u32, Vec<Task>>) -> StoreResult<usize> {
        let mut n = 0;
        for (pid, group) in groups {
            self.write_partition(pid, |p| Ok((p.plan_insert(&group)?, ())))?;
            let mut home = self.task_home.write();
            for t in &group {
                home.insert(t.task_id, pid);
            }
            n += group.len();
        }
        Ok(n)
    }

    /// Inserts READY tasks. Each partition's share commits atomically.
    pub fn insert_tasks(&self, batch: Vec<Task>) -> StoreResult<usize> {
        if batch.is_empty() {
            return Ok(0);
        }
        let mut meta = self.meta.lock();
        let groups = self.check_batch(&meta, &batch)?;
        let n = self.insert_groups(groups)?;
        let max_id = batch.iter().map(|t| t.task_id).max().unwrap_or(0);
        if meta.cursor.next_task_id <= max_id {
            meta.cursor.next_task_id = max_id + 1;
        }
        Ok(n)
    }

    /// Inserts a supervisor-generated batch and advances the generation cursor,
    /// provided the caller still holds the lease and generated from the current
    /// cursor position.
    pub fn generate_tasks(&self, req: GenerateRequest) -> StoreResult<usize> {
        let mut meta = self.meta.lock();
        if meta.lease.epoch != req.epoch || meta.lease.holder.as_deref() != Some(req.holder.as_str()) {
            return Err(StoreError::LeaseLost(req.epoch));
        }
        if meta.cursor.next_task_id != req.expected_next_task_id {
            return Err(StoreError::CursorConflict {
                expected: req.expected_next_task_id,
                actual: meta.cursor.next_task_id,
            });
        }
        for (act, ids) in &req.advance.materialized {
            if let Some(id) = ids.iter().find(|id| meta.cursor.is_materialized(act, **id)) {
                return Err(StoreError::Invalid(format!(
                    "tuple {id} already materialized for activity {act}"
                )));
            }
        }
        let groups = self.check_batch(&meta, &req.tasks)?;
        let n = self.insert_groups(groups)?;
        let cursor = &mut meta.cursor;
        cursor.next_task_id = req.advance.next_task_id.max(cursor.next_task_id);
        if req.advance.next_worker >= 1 {
            cursor.next_worker = req.advance.next_worker;
        }
        for (act, ids) in req.advance.materialized {
            cursor.materialized.entry(act).or_default().extend(ids);
        }
        cursor.reduced.extend(req.advance.reduced);
        Ok(n)
    }

    /// Claims up to `max_n` READY tasks of `worker_id`'s partition. A repeated
    /// `token` replays the original answer instead of claiming again.
    pub fn claim_ready(&self, worker_id: u32, max_n: usize, token: Option<u64>) -> StoreResult<Vec<Task>> {
        let pid = partition_of(worker_id, self.config.workers)?;
        if max_n == 0 {
            return Ok(Vec::new());
        }
        self.write_partition(pid, |p| {
            let now = self.clock.now_ms();
            Ok(p.plan_claim(max_n, now, token))
        })
    }

    fn lookup_tuples(&self, ids: &[TupleId]) -> StoreResult<Vec<DomainTuple>> {
        let homes: Vec<Option<u32>> = {
            let home = self.tuple_home.read();
            ids.iter().map(|id| home.get(id).copied()).collect()
        };
        let mut by_home: BTreeMap<u32, Vec<TupleId>> = BTreeMap::new();
        for (id, h) in ids.iter().zip(&homes) {
            let h = h.ok_or_else(|| StoreError::Invalid(format!("unknown tuple {id}")))?;
            by_home.entry(h).or_default().push(*id);
        }
        let mut found: HashMap<TupleId, DomainTuple> = HashMap::new();
        for (h, group) in by_home {
            if h == META_HOME {
                let meta = self.meta.lock();
                for id in group {
                    if let Some(t) = meta.inputs.get(&id) {
                        found.insert(id, t.clone());
                    }
                }
            } else {
                self.read_within(h, |p| {
                    for id in group {
                        if let Some(t) = p.tuple(id) {
                            found.insert(id, t.clone());
                        }
                    }
                })?;
            }
        }
        ids.iter()
            .map(|id| {
                found
                    .get(id)
                    .cloned()
                    .ok_or_else(|| StoreError::Invalid(format!("unknown tuple {id}")))
            })
            .collect()
    }

    pub fn fetch_task_inputs(&self, task_id: TaskId) -> StoreResult<Vec<DomainTuple>> {
        let pid = self.partition_of_task(task_id).ok_or(StoreError::UnknownTask(task_id))?;
        let ids = self
            .read_partition(pid, |p| p.task(task_id).map(|t| t.input_tuple_ids.clone()))?
            .ok_or(StoreError::UnknownTask(task_id))?;
        self.lookup_tuples(&ids)
    }

    pub fn get_task(&self, task_id: TaskId) -> StoreResult<Task> {
        let pid = self.partition_of_task(task_id).ok_or(StoreError::UnknownTask(task_id))?;
        self.read_partition(pid, |p| p.task(task_id).cloned())?
            .ok_or(StoreError::UnknownTask(task_id))
    }

    /// Commits a task's result: FINISHED status, output tuples and their
    /// provenance, in one partition transaction.
    pub fn complete_task(
        &self,
        task_id: TaskId,
        std_out: &str,
        outputs: &[NewTuple],
        core_slot: Option<u32>,
    ) -> StoreResult<CompleteAck> {
        let pid = self.partition_of_task(task_id).ok_or(StoreError::UnknownTask(task_id))?;
        let mut new_ids = Vec::new();
        let ack = self.write_partition(pid, |p| {
            let now = self.clock.now_ms();
            let mut next_tuple = || {
                let id = self.next_tuple.fetch_add(1, Ordering::SeqCst);
                new_ids.push(id);
                id
            };
            let mut next_link = || self.next_link.fetch_add(1, Ordering::SeqCst);
            p.plan_complete(task_id, std_out, outputs, core_slot, now, &mut next_tuple, &mut next_link)
        })?;
        if ack == CompleteAck::Committed && !new_ids.is_empty() {
            let mut home = self.tuple_home.write();
            for id in new_ids {
                home.insert(id, pid);
            }
        }
        Ok(ack)
    }

    pub fn fail_task(&self, task_id: TaskId, max_retries: u32) -> StoreResult<TaskStatus> {
        let pid = self.partition_of_task(task_id).ok_or(StoreError::UnknownTask(task_id))?;
        self.write_partition(pid, |p| p.plan_fail(task_id, max_retries, self.clock.now_ms()))
    }

    /// Upstream tuples of `activity_id` not yet materialized into its tasks.
    /// For a source activity these are the workflow inputs.
    pub fn pending_inputs(&self, activity_id: &str) -> StoreResult<PendingInputs> {
        self.simulate_txn();
        let meta = self.meta.lock();
        let workflow = meta.workflow.as_ref().ok_or(StoreError::DatabaseNotCreated)?;
        if workflow.activity(activity_id).is_none() {
            return Err(StoreError::UnknownActivity(activity_id.to_string()));
        }
        let done = meta.cursor.materialized.get(activity_id);
        let is_new = |id: &TupleId| !done.is_some_and(|s| s.contains(id));
        let mut tuples: Vec<DomainTuple> = Vec::new();
        if workflow.is_source(activity_id) {
            tuples.extend(meta.inputs.values().filter(|t| is_new(&t.tuple_id)).cloned());
        } else {
            let ups: Vec<String> = workflow.upstream(activity_id).into_iter().map(String::from).collect();
            for pid in self.partitions() {
                self.read_within(pid, |p| {
                    for up in &ups {
                        tuples.extend(p.outputs_of_activity(up).filter(|t| is_new(&t.tuple_id)).cloned());
                    }
                })?;
            }
            tuples.sort_by_key(|t| t.tuple_id);
        }
        Ok(PendingInputs { tuples })
    }

    // ---- supervisor lease ------------------------------------------------------

    /// Compare-and-set on the lease row: succeeds only if the lease epoch is
    /// still `expected_epoch`. The winner gets epoch `expected_epoch + 1`.
    pub fn acquire_lease(&self, candidate: &str, expected_epoch: u64) -> StoreResult<SupervisorLease> {
        let mut meta = self.meta.lock();
        if meta.lease.epoch != expected_epoch {
            return Err(StoreError::LeaseLost(expected_epoch));
        }
        meta.lease = SupervisorLease {
            holder: Some(candidate.to_string()),
            epoch: expected_epoch + 1,
            heartbeat_ms: self.clock.now_ms(),
        };
        Ok(meta.lease.clone())
    }

    pub fn heartbeat(&self, holder: &str, epoch: u64) -> StoreResult<SupervisorLease> {
        let mut meta = self.meta.lock();
        if meta.lease.epoch != epoch || meta.lease.holder.as_deref() != Some(holder) {
            return Err(StoreError::LeaseLost(epoch));
        }
        meta.lease.heartbeat_ms = self.clock.now_ms();
        Ok(meta.lease.clone())
    }

    pub fn mark_complete(&self, holder: &str, epoch: u64) -> StoreResult<Millis> {
        let mut meta = self.meta.lock();
        if meta.lease.epoch != epoch || meta.lease.holder.as_deref() != Some(holder) {
            return Err(StoreError::LeaseLost(epoch));
        }
        let now = self.clock.now_ms();
        meta.completed_at = Some(now);
        Ok(now)
    }

    // ---- reads -----------------------------------------------------------------

    pub fn snapshot_tasks(&self, filter: &Predicate) -> StoreResult<Vec<Task>> {
        self.simulate_txn();
        let status = filter.pinned_str("status").and_then(TaskStatus::parse);
        let mut out = Vec::new();
        for pid in self.partitions() {
            self.read_within(pid, |p| match status {
                Some(st) => out.extend(p.tasks_with_status(st).filter(|t| filter.matches(*t)).cloned()),
                None => out.extend(p.tasks().filter(|t| filter.matches(*t)).cloned()),
            })?;
        }
        out.sort_by_key(|t| t.task_id);
        Ok(out)
    }

    pub fn snapshot_tuples(&self, filter: &Predicate) -> StoreResult<Vec<DomainTuple>> {
        self.simulate_txn();
        let mut out: Vec<DomainTuple> = {
            let meta = self.meta.lock();
            meta.inputs.values().filter(|t| filter.matches(*t)).cloned().collect()
        };
        for pid in self.partitions() {
            self.read_within(pid, |p| out.extend(p.tuples().filter(|t| filter.matches(*t)).cloned()))?;
        }
        out.sort_by_key(|t| t.tuple_id);
        Ok(out)
    }

    pub fn snapshot_links(&self, filter: &Predicate) -> StoreResult<Vec<ProvLink>> {
        self.simulate_txn();
        let mut out = Vec::new();
        for pid in self.partitions() {
            self.read_within(pid, |p| out.extend(p.links().filter(|l| filter.matches(*l)).cloned()))?;
        }
        out.sort_by_key(|l| l.link_id);
        Ok(out)
    }

    pub fn metadata_view(&self) -> MetadataView {
        let meta = self.meta.lock();
        MetadataView {
            workflow: meta.workflow.clone(),
            topology: meta.topology.clone(),
            input_count: meta.inputs.len(),
            next_worker: meta.cursor.next_worker,
            next_task_id: meta.cursor.next_task_id,
            reduced: meta.cursor.reduced.iter().cloned().collect(),
            materialized: meta.cursor.materialized.iter().map(|(a, s)| (a.clone(), s.len())).collect(),
            lease: meta.lease.clone(),
            steering: meta.steering.clone(),
            started_at: meta.started_at,
            completed_at: meta.completed_at,
            placements: self.placement.read().clone(),
            now_ms: self.clock.now_ms(),
        }
    }

    pub fn snapshot(&self, table: Table, filter: &Predicate) -> StoreResult<Rows> {
        Ok(match table {
            Table::WorkQueue => Rows::WorkQueue(self.snapshot_tasks(filter)?),
            Table::DomainTuples => Rows::DomainTuples(self.snapshot_tuples(filter)?),
            Table::ProvLinks => Rows::ProvLinks(self.snapshot_links(filter)?),
            Table::Metadata => Rows::Metadata(Box::new(self.metadata_view())),
        })
    }

    pub fn progress(&self) -> StoreResult<Progress> {
        self.simulate_txn();
        let mut progress = Progress::default();
        for pid in self.partitions() {
            let (counts, outputs): (Vec<((String, TaskStatus), u64)>, Vec<(String, usize)>) =
                self.read_within(pid, |p| {
                    (
                        p.status_counts().map(|(k, v)| (k.clone(), *v)).collect(),
                        p.output_counts().map(|(a, n)| (a.clone(), n)).collect(),
                    )
                })?;
            for (act, n) in outputs {
                *progress.outputs_by_activity.entry(act).or_default() += n as u64;
            }
            let worker = progress.by_worker.entry(pid).or_default();
            for ((_, st), n) in &counts {
                worker.add(*st, *n);
            }
            for ((act, st), n) in counts {
                progress.by_activity.entry(act).or_default().add(st, n);
                progress.total.add(st, n);
            }
        }
        Ok(progress)
    }

    pub fn dump_tables(&self) -> StoreResult<TableDump> {
        Ok(TableDump {
            tasks: self.snapshot_tasks(&Predicate::True)?,
            tuples: self.snapshot_tuples(&Predicate::True)?,
            links: self.snapshot_links(&Predicate::True)?,
        })
    }

    /// Serialized contents of the copy of `pid` held by `data_node`, if any.
    pub fn dump_copy(&self, pid: u32, data_node: u32) -> Option<String> {
        let node = self.nodes.get(data_node as usize - 1)?;
        let copy = node.partitions.read().get(&pid).cloned()?;
        let dump = copy.read().dump();
        Some(dump)
    }

    // ---- steering --------------------------------------------------------------

    fn steer_candidates(
        &self,
        pid: u32,
        activity_id: &str,
        predicate: &Predicate,
    ) -> StoreResult<Vec<(Task, Vec<DomainTuple>)>> {
        let ready: Vec<Task> = self.read_partition(pid, |p| {
            p.tasks_with_status(TaskStatus::Ready)
                .filter(|t| t.activity_id == activity_id)
                .cloned()
                .collect()
        })?;
        let mut out = Vec::new();
        for task in ready {
            let inputs = self.lookup_tuples(&task.input_tuple_ids)?;
            if inputs.iter().any(|tuple| predicate.matches(&SteerRow { task: &task, tuple })) {
                out.push((task, inputs));
            }
        }
        Ok(out)
    }

    /// Rewrites the inputs of READY tasks of `activity_id` whose input tuple
    /// matches `predicate`. Each affected task gets a fresh input tuple derived
    /// from the old one, a re-rendered command line, and a STEERED_BY link.
    pub fn steer_update(
        &self,
        activity_id: &str,
        predicate: &Predicate,
        assignments: &BTreeMap<String, Scalar>,
    ) -> StoreResult<SteeringAction> {
        let workflow = self.workflow().ok_or(StoreError::DatabaseNotCreated)?;
        let act = workflow
            .activity(activity_id)
            .ok_or_else(|| StoreError::UnknownActivity(activity_id.to_string()))?
            .clone();
        if let Some(bad) = assignments.keys().find(|k| !act.input_schema.contains(k)) {
            return Err(StoreError::UnknownField(bad.clone()));
        }
        if assignments.is_empty() {
            return Err(StoreError::Invalid("update needs at least one assignment".into()));
        }
        let action_id = self.next_action.fetch_add(1, Ordering::SeqCst);
        let issued_at = self.clock.now_ms();
        let mut affected = Vec::new();
        for pid in self.partitions() {
            let candidates = self.steer_candidates(pid, activity_id, predicate)?;
            if candidates.is_empty() {
                continue;
            }
            let mut new_ids = Vec::new();
            let done = self.write_partition(pid, |p| {
                let mut ws = WriteSet::default();
                let mut done = Vec::new();
                for (task, inputs) in &candidates {
                    let Some(cur) = p.task(task.task_id) else { continue };
                    if cur.status != TaskStatus::Ready || cur.input_tuple_ids != task.input_tuple_ids {
                        continue;
                    }
                    let mut updated = cur.clone();
                    let mut new_inputs = Vec::with_capacity(inputs.len());
                    let mut changed = false;
                    for tuple in inputs {
                        let hit = predicate.matches(&SteerRow { task: cur, tuple });
                        let differs = assignments.iter().any(|(k, v)| tuple.fields.get(k) != Some(v));
                        if !(hit && differs) {
                            new_inputs.push(tuple.clone());
                            continue;
                        }
                        changed = true;
                        let tuple_id = self.next_tuple.fetch_add(1, Ordering::SeqCst);
                        new_ids.push(tuple_id);
                        let mut fields = tuple.fields.clone();
                        fields.extend(assignments.iter().map(|(k, v)| (k.clone(), v.clone())));
                        let derived = DomainTuple {
                            tuple_id,
                            activity_id: tuple.activity_id.clone(),
                            produced_by_task: None,
                            fields,
                            raw_file_path: tuple.raw_file_path.clone(),
                            size_bytes: tuple.size_bytes,
                            derived_from: Some(tuple.tuple_id),
                        };
                        ws.links.push(ProvLink {
                            link_id: self.next_link.fetch_add(1, Ordering::SeqCst),
                            kind: ProvKind::SteeredBy,
                            task_id: action_id,
                            tuple_id,
                        });
                        ws.tuples.push(derived.clone());
                        new_inputs.push(derived);
                    }
                    if !changed {
                        continue;
                    }
                    updated.input_tuple_ids = new_inputs.iter().map(|t| t.tuple_id).collect();
                    if let Ok(cmd) = render_command(&act.command_template, new_inputs.iter().map(|t| &t.fields)) {
                        updated.command_line = cmd;
                    }
                    done.push(updated.task_id);
                    ws.tasks.push(updated);
                }
                Ok((ws, done))
            })?;
            if !new_ids.is_empty() {
                let mut home = self.tuple_home.write();
                for id in new_ids {
                    home.insert(id, pid);
                }
            }
            affected.extend(done);
        }
        affected.sort_unstable();
        Ok(self.record_action(SteeringAction {
            action_id,
            kind: SteeringKind::UpdateInputs,
            activity_id: activity_id.to_string(),
            predicate: predicate.clone(),
            assignments: assignments.clone(),
            issued_at,
            affected_task_ids: affected,
        }))
    }

    /// Aborts READY tasks of `activity_id` whose input matches `predicate`.
    pub fn steer_prune(&self, activity_id: &str, predicate: &Predicate) -> StoreResult<SteeringAction> {
        let workflow = self.workflow().ok_or(StoreError::DatabaseNotCreated)?;
        if workflow.activity(activity_id).is_none() {
            return Err(StoreError::UnknownActivity(activity_id.to_string()));
        }
        let action_id = self.next_action.fetch_add(1, Ordering::SeqCst);
        let issued_at = self.clock.now_ms();
        let mut affected = Vec::new();
        for pid in self.partitions() {
            let candidates = self.steer_candidates(pid, activity_id, predicate)?;
            if candidates.is_empty() {
                continue;
            }
            let done = self.write_partition(pid, |p| {
                let now = self.clock.now_ms();
                let mut ws = WriteSet::default();
                let mut done = Vec::new();
                for (task, _) in &candidates {
                    let Some(cur) = p.task(task.task_id) else { continue };
                    if !cur.status.can_prune() || cur.input_tuple_ids != task.input_tuple_ids {
                        continue;
                    }
                    let mut pruned = cur.clone();
                    pruned.status = TaskStatus::Aborted;
                    pruned.end_time = Some(now);
                    pruned.std_out = "pruned by steering".to_string();
                    for tuple_id in &cur.input_tuple_ids {
                        ws.links.push(ProvLink {
                            link_id: self.next_link.fetch_add(1, Ordering::SeqCst),
                            kind: ProvKind::SteeredBy,
                            task_id: action_id,
                            tuple_id: *tuple_id,
                        });
                    }
                    done.push(pruned.task_id);
                    ws.tasks.push(pruned);
                }
                Ok((ws, done))
            })?;
            affected.extend(done);
        }
        affected.sort_unstable();
        Ok(self.record_action(SteeringAction {
            action_id,
            kind: SteeringKind::Prune,
            activity_id: activity_id.to_string(),
            predicate: predicate.clone(),
            assignments: BTreeMap::new(),
            issued_at,
            affected_task_ids: affected,
        }))
    }

    fn record_action(&self, action: SteeringAction) -> SteeringAction {
        self.meta.lock().steering.push(action.clone());
        action
    }

    // ---- failures --------------------------------------------------------------

    /// Marks a data node dead. Its copies become unreachable; partitions whose
    /// primary lived there are unavailable until [`Self::promote_replica`].
    pub fn fail_data_node(&self, data_node: u32) -> StoreResult<()> {
        let node = self
            .nodes
            .get(data_node.wrapping_sub(1) as usize)
            .ok_or_else(|| StoreError::Config(format!("no data node d{data_node}")))?;
        node.alive.store(false, Ordering::SeqCst);
        Ok(())
    }

    /// Promotes the replicas of every partition whose primary was on
    /// `failed_data_node`, and drops replicas that lived there.
    pub fn promote_replica(&self, failed_data_node: u32) -> StoreResult<Vec<PartitionPlacement>> {
        let mut placement = self.placement.write();
        let mut lost = None;
        for pl in placement.iter_mut() {
            if pl.replica_data_node == Some(failed_data_node) {
                pl.replica_data_node = None;
            }
            if pl.primary_data_node == failed_data_node {
                match pl.replica_data_node.filter(|r| self.node_alive(*r)) {
                    Some(r) => {
                        pl.primary_data_node = r;
                        pl.replica_data_node = None;
                    }
                    None => {
                        lost.get_or_insert(pl.partition_id);
                    }
                }
            }
        }
        match lost {
            Some(pid) => Err(StoreError::PartitionUnavailable(pid)),
            None => Ok(placement.clone()),
        }
    }

    /// Kills a data node and immediately promotes replicas.
    pub fn kill_data_node(&self, data_node: u32) -> StoreResult<Vec<PartitionPlacement>> {
        self.fail_data_node(data_node)?;
        self.promote_replica(data_node)
    }

    // ---- persistence -----------------------------------------------------------

    /// Writes each live data node's partition copies as JSON lines, one file
    /// per table, plus the metadata row, under `dir/d<n>/`.
    pub fn checkpoint(&self, dir: &Path) -> StoreResult<()> {
        let io = |e: std::io::Error| StoreError::Unavailable(format!("checkpoint: {e}"));
        let meta = {
            Checkpointed {
                meta: self.meta.lock().clone(),
                next_tuple: self.next_tuple.load(Ordering::SeqCst),
                next_link: self.next_link.load(Ordering::SeqCst),
                next_action: self.next_action.load(Ordering::SeqCst),
                config: self.config.clone(),
            }
        };
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.alive.load(Ordering::SeqCst) {
                continue;
            }
            let nd = dir.join(format!("d{}", i + 1));
            fs::create_dir_all(&nd).map_err(io)?;
            let copies: Vec<(u32, Partition)> = node
                .partitions
                .read()
                .iter()
                .map(|(pid, p)| (*pid, p.read().clone()))
                .collect();
            let mut files = Vec::new();
            for t in [Table::WorkQueue, Table::DomainTuples, Table::ProvLinks] {
                let f = fs::File::create(nd.join(format!("{}.jsonl", t.as_str()))).map_err(io)?;
                files.push(BufWriter::new(f));
            }
            for (pid, p) in &copies {
                for t in p.tasks() {
                    write_line(&mut files[0], *pid, t).map_err(io)?;
                }
                for t in p.tuples() {
                    write_line(&mut files[1], *pid, t).map_err(io)?;
                }
                for l in p.links() {
                    write_line(&mut files[2], *pid, l).map_err(io)?;
                }
            }
            for f in &mut files {
                f.flush().map_err(io)?;
            }
            let text = serde_json::to_string_pretty(&meta).map_err(|e| StoreError::Protocol(e.to_string()))?;
            fs::write(nd.join("metadata.json"), text).map_err(io)?;
        }
        Ok(())
    }

    /// Rebuilds a store from a checkpoint directory. Copies of the same
    /// partition found on several nodes are merged by row id.
    pub fn restore(dir: &Path, clock: Arc<dyn Clock>) -> StoreResult<Store> {
        let io = |e: std::io::Error| StoreError::Unavailable(format!("restore: {e}"));
        let mut node_dirs: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir() && p.join("metadata.json").exists())
            .collect();
        node_dirs.sort();
        let first = node_dirs
            .first()
            .ok_or_else(|| StoreError::Unavailable("restore: no data node directories".into()))?;
        let text = fs::read_to_string(first.join("metadata.json")).map_err(io)?;
        let saved: Checkpointed = serde_json::from_str(&text).map_err(|e| StoreError::Protocol(e.to_string()))?;
        let store = Store::with_clock(saved.config.clone(), clock)?;
        let mut tasks: BTreeMap<u32, BTreeMap<TaskId, Task>> = BTreeMap::new();
        let mut tuples: BTreeMap<u32, BTreeMap<TupleId, DomainTuple>> = BTreeMap::new();
        let mut links: BTreeMap<u32, BTreeMap<u64, ProvLink>> = BTreeMap::new();
        for nd in &node_dirs {
            for (pid, t) in read_lines::<Task>(&nd.join("work_queue.jsonl"))? {
                tasks.entry(pid).or_default().insert(t.task_id, t);
            }
            for (pid, t) in read_lines::<DomainTuple>(&nd.join("domain_tuples.jsonl"))? {
                tuples.entry(pid).or_default().insert(t.tuple_id, t);
            }
            for (pid, l) in read_lines::<ProvLink>(&nd.join("prov_links.jsonl"))? {
                links.entry(pid).or_default().insert(l.link_id, l);
            }
        }
        let inputs: Vec<DomainTuple> = saved.meta.inputs.values().cloned().collect();
        {
            let mut meta = store.meta.lock();
            *meta = saved.meta;
        }
        store.load_inputs(inputs);
        for pid in store.partitions() {
            store.load_partition_rows(
                pid,
                tasks.remove(&pid).unwrap_or_default().into_values().collect(),
                tuples.remove(&pid).unwrap_or_default().into_values().collect(),
                links.remove(&pid).unwrap_or_default().into_values().collect(),
            )?;
        }
        store.next_tuple.fetch_max(saved.next_tuple, Ordering::SeqCst);
        store.next_link.fetch_max(saved.next_link, Ordering::SeqCst);
        store.next_action.fetch_max(saved.next_action, Ordering::SeqCst);
        Ok(store)
    }

    /// Places workflow input tuples in the metadata table, keeping their ids.
    pub fn load_inputs(&self, inputs: Vec<DomainTuple>) {
        let mut meta = self.meta.lock();
        let mut home = self.tuple_home.write();
        for t in inputs {
            self.next_tuple.fetch_max(t.tuple_id + 1, Ordering::SeqCst);
            home.insert(t.tuple_id, META_HOME);
            meta.inputs.insert(t.tuple_id, t);
        }
    }

    /// Loads rows verbatim into partition `pid` (and its replica), keeping ids
    /// and statuses. Used for fixtures and restore.
    pub fn load_partition_rows(
        &self,
        pid: u32,
        tasks: Vec<Task>,
        tuples: Vec<DomainTuple>,
        links: Vec<ProvLink>,
    ) -> StoreResult<()> {
        for t in &tasks {
            if partition_of(t.worker_id, self.config.workers)? != pid {
                return Err(StoreError::Invalid(format!(
                    "task {} of worker {} cannot live in partition {pid}",
                    t.task_id, t.worker_id
                )));
            }
            t.check_invariants().map_err(StoreError::Invalid)?;
        }
        let task_ids: Vec<TaskId> = tasks.iter().map(|t| t.task_id).collect();
        let tuple_ids: Vec<TupleId> = tuples.iter().map(|t| t.tuple_id).collect();
        let max_task = task_ids.iter().copied().max();
        self.next_tuple
            .fetch_max(tuple_ids.iter().copied().max().unwrap_or(0) + 1, Ordering::SeqCst);
        self.next_link
            .fetch_max(links.iter().map(|l| l.link_id).max().unwrap_or(0) + 1, Ordering::SeqCst);
        let ws = WriteSet {
            tasks,
            tuples,
            links,
            ..WriteSet::default()
        };
        self.write_partition(pid, |_| Ok((ws, ())))?;
        {
            let mut home = self.task_home.write();
            for id in task_ids {
                home.insert(id, pid);
            }
        }
        {
            let mut home = self.tuple_home.write();
            for id in tuple_ids {
                home.insert(id, pid);
            }
        }
        if let Some(max) = max_task {
            let mut meta = self.meta.lock();
            if meta.cursor.next_task_id <= max {
                meta.cursor.next_task_id = max + 1;
            }
        }
        Ok(())
    }

    /// Installs a workflow definition without inputs or cursor changes.
    pub fn set_workflow(&self, workflow: WorkflowSpec, topology: Option<ClusterTopology>) {
        let mut meta = self.meta.lock();
        meta.workflow = Some(workflow);
        if topology.is_some() {
            meta.topology = topology;
        }
        if meta.started_at.is_none() {
            meta.started_at = Some(self.clock.now_ms());
        }
    }

    pub fn next_action_id(&self) -> ActionId {
        self.next_action.load(Ordering::SeqCst)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpointed {
    config: StoreConfig,
    meta: Metadata,
    next_tuple: u64,
    next_link: u64,
    next_action: u64,
}

#[derive(Serialize, Deserialize)]
struct Line<T> {
    partition: u32,
    row: T,
}

fn write_line<T: Serialize>(w: &mut impl Write, partition: u32, row: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, &Line { partition, row })?;
    w.write_all(b"\n")
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> StoreResult<Vec<(u32, T)>> {
    let f = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::Unavailable(format!("restore: {e}"))),
    };
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| StoreError::Unavailable(format!("restore: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line<T> = serde_json::from_str(&line)
            .map_err(|e| StoreError::Protocol(format!("{}: {e}", path.display())))?;
        out.push((l.partition, l.row));
    }
    Ok(out)
}
