//! One copy of one partition: work-queue rows plus the domain tuples and
//! provenance links co-located with them.
//!
//! Mutations are split in two steps. A `plan_*` method reads the partition and
//! produces a [`WriteSet`] of whole rows to write; [`Partition::apply`] installs
//! it. The primary and the replica apply the same write set, so both copies
//! stay byte-identical.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{StoreError, StoreResult};
use crate::model::{
    DomainTuple, LinkId, Millis, ProvKind, ProvLink, Scalar, Task, TaskId, TaskStatus, TupleId,
};

/// Output tuple as produced by a task, before the store assigns its id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NewTuple {
    pub fields: BTreeMap<String, Scalar>,
    #[serde(default)]
    pub raw_file_path: Option<String>,
    #[serde(default)]
    pub size_bytes: Option<u64>,
}

impl NewTuple {
    pub fn from_fields(fields: BTreeMap<String, Scalar>) -> Self {
        NewTuple {
            fields,
            raw_file_path: None,
            size_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct ClaimMemo {
    token: u64,
    task_ids: Vec<TaskId>,
}

const CLAIM_MEMO_LEN: usize = 64;

/// Rows to install in a partition copy.
#[derive(Debug, Default, Clone)]
pub struct WriteSet {
    pub tasks: Vec<Task>,
    pub tuples: Vec<DomainTuple>,
    pub links: Vec<ProvLink>,
    pub(crate) claim: Option<ClaimMemo>,
}

impl WriteSet {
    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty() && self.tuples.is_empty() && self.links.is_empty() && self.claim.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompleteAck {
    Committed,
    /// Same payload already committed; nothing written.
    Duplicate,
}

#[derive(Debug, Default, Clone)]
struct Index {
    ready: BTreeSet<TaskId>,
    running: BTreeSet<TaskId>,
    /// Task-produced tuples per activity. Workflow inputs and steering-derived
    /// tuples are not indexed here.
    outputs_by_activity: HashMap<String, BTreeSet<TupleId>>,
    produced_by: HashMap<TaskId, Vec<TupleId>>,
    counts: HashMap<(String, TaskStatus), u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Partition {
    pub id: u32,
    tasks: BTreeMap<TaskId, Task>,
    tuples: BTreeMap<TupleId, DomainTuple>,
    links: BTreeMap<LinkId, ProvLink>,
    claims: VecDeque<ClaimMemo>,
    #[serde(skip)]
    index: Index,
}

impl Partition {
    pub fn new(id: u32) -> Self {
        Partition {
            id,
            tasks: BTreeMap::new(),
            tuples: BTreeMap::new(),
            links: BTreeMap::new(),
            claims: VecDeque::new(),
            index: Index::default(),
        }
    }

    pub fn apply(&mut self, ws: &WriteSet) {
        for task in &ws.tasks {
            let old = self.tasks.insert(task.task_id, task.clone());
            if let Some(old) = old {
                self.unindex_task(&old);
            }
            self.index_task(task);
        }
        for tuple in &ws.tuples {
            self.index_tuple(tuple);
            self.tuples.insert(tuple.tuple_id, tuple.clone());
        }
        for link in &ws.links {
            self.links.insert(link.link_id, link.clone());
        }
        if let Some(memo) = &ws.claim {
            self.claims.push_back(memo.clone());
            while self.claims.len() > CLAIM_MEMO_LEN {
                self.claims.pop_front();
            }
        }
    }

    fn index_task(&mut self, task: &Task) {
        match task.status {
            TaskStatus::Ready => {
                self.index.ready.insert(task.task_id);
            }
            TaskStatus::Running => {
                self.index.running.insert(task.task_id);
            }
            _ => {}
        }
        *self
            .index
            .counts
            .entry((task.activity_id.clone(), task.status))
            .or_default() += 1;
    }

    fn index_tuple(&mut self, tuple: &DomainTuple) {
        if let Some(t) = tuple.produced_by_task {
            self.index
                .outputs_by_activity
                .entry(tuple.activity_id.clone())
                .or_default()
                .insert(tuple.tuple_id);
            self.index.produced_by.entry(t).or_default().push(tuple.tuple_id);
        }
    }

    fn unindex_task(&mut self, task: &Task) {
        self.index.ready.remove(&task.task_id);
        self.index.running.remove(&task.task_id);
        if let Some(c) = self.index.counts.get_mut(&(task.activity_id.clone(), task.status)) {
            *c -= 1;
        }
    }

    pub fn task(&self, id: TaskId) -> Option<&Task> {
        self.tasks.get(&id)
    }

    pub fn tuple(&self, id: TupleId) -> Option<&DomainTuple> {
        self.tuples.get(&id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn tuples(&self) -> impl Iterator<Item = &DomainTuple> {
        self.tuples.values()
    }

    pub fn links(&self) -> impl Iterator<Item = &ProvLink> {
        self.links.values()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn tasks_with_status(&self, status: TaskStatus) -> Box<dyn Iterator<Item = &Task> + '_> {
        match status {
            TaskStatus::Ready => Box::new(self.index.ready.iter().map(|id| &self.tasks[id])),
            TaskStatus::Running => Box::new(self.index.running.iter().map(|id| &self.tasks[id])),
            other => Box::new(self.tasks.values().filter(move |t| t.status == other)),
        }
    }

    /// Tuples produced by tasks of `activity_id`, by ascending id.
    pub fn outputs_of_activity<'a>(&'a self, activity_id: &str) -> impl Iterator<Item = &'a DomainTuple> + 'a {
        self.index
            .outputs_by_activity
            .get(activity_id)
            .into_iter()
            .flat_map(move |ids| ids.iter().map(move |id| &self.tuples[id]))
    }

    pub fn outputs_of(&self, task_id: TaskId) -> Vec<&DomainTuple> {
        self.index
            .produced_by
            .get(&task_id)
            .map(|ids| ids.iter().map(|id| &self.tuples[id]).collect())
            .unwrap_or_default()
    }

    /// Task counts per (activity, status).
    pub fn status_counts(&self) -> impl Iterator<Item = (&(String, TaskStatus), &u64)> {
        self.index.counts.iter()
    }

    /// Number of task-produced tuples per activity.
    pub fn output_counts(&self) -> impl Iterator<Item = (&String, usize)> {
        self.index.outputs_by_activity.iter().map(|(a, ids)| (a, ids.len()))
    }

    /// Canonical serialization of the copy's contents, indexes excluded.
    pub fn dump(&self) -> String {
        serde_json::to_string(self).expect("partition serializes")
    }

    /// Rebuilds indexes after deserialization.
    pub fn reindex(&mut self) {
        self.index = Index::default();
        let tasks: Vec<Task> = self.tasks.values().cloned().collect();
        for t in &tasks {
            self.index_task(t);
        }
        let tuples: Vec<DomainTuple> = self.tuples.values().cloned().collect();
        for tuple in &tuples {
            self.index_tuple(tuple);
        }
    }

    pub fn plan_insert(&self, batch: &[Task]) -> StoreResult<WriteSet> {
        for t in batch {
            if self.tasks.contains_key(&t.task_id) {
                return Err(StoreError::DuplicateTask(t.task_id));
            }
        }
        Ok(WriteSet {
            tasks: batch.to_vec(),
            ..WriteSet::default()
        })
    }

    /// Selects up to `max_n` READY tasks in ascending id order and marks them
    /// RUNNING. A repeated `token` returns the tasks of the original claim that
    /// are still RUNNING, without writing.
    pub fn plan_claim(&self, max_n: usize, now: Millis, token: Option<u64>) -> (WriteSet, Vec<Task>) {
        if let Some(token) = token {
            if let Some(memo) = self.claims.iter().find(|m| m.token == token) {
                let tasks = memo
                    .task_ids
                    .iter()
                    .filter_map(|id| self.tasks.get(id))
                    .filter(|t| t.status == TaskStatus::Running)
                    .cloned()
                    .collect();
                return (WriteSet::default(), tasks);
            }
        }
        let claimed: Vec<Task> = self
            .index
            .ready
            .iter()
            .take(max_n)
            .map(|id| {
                let mut t = self.tasks[id].clone();
                t.status = TaskStatus::Running;
                t.start_time = Some(now);
                t.end_time = None;
                t
            })
            .collect();
        let claim = token.map(|token| ClaimMemo {
            token,
            task_ids: claimed.iter().map(|t| t.task_id).collect(),
        });
        let ws = WriteSet {
            tasks: claimed.clone(),
            claim,
            ..WriteSet::default()
        };
        (ws, claimed)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn plan_complete(
        &self,
        task_id: TaskId,
        std_out: &str,
        outputs: &[NewTuple],
        core_slot: Option<u32>,
        now: Millis,
        next_tuple_id: &mut dyn FnMut() -> TupleId,
        next_link_id: &mut dyn FnMut() -> LinkId,
    ) -> StoreResult<(WriteSet, CompleteAck)> {
        let task = self.tasks.get(&task_id).ok_or(StoreError::UnknownTask(task_id))?;
        match task.status {
            TaskStatus::Running => {}
            TaskStatus::Finished if self.same_completion(task, std_out, outputs) => {
                return Ok((WriteSet::default(), CompleteAck::Duplicate));
            }
            from => {
                return Err(StoreError::IllegalTransition {
                    task_id,
                    from,
                    to: TaskStatus::Finished,
                })
            }
        }
        let mut done = task.clone();
        done.status = TaskStatus::Finished;
        done.end_time = Some(now.max(task.start_time.unwrap_or(0)));
        done.std_out = std_out.to_string();
        if let Some(core) = core_slot {
            done.core_slot = core.max(1);
        }
        let mut ws = WriteSet::default();
        for out in outputs {
            let tuple_id = next_tuple_id();
            ws.tuples.push(DomainTuple {
                tuple_id,
                activity_id: task.activity_id.clone(),
                produced_by_task: Some(task_id),
                fields: out.fields.clone(),
                raw_file_path: out.raw_file_path.clone(),
                size_bytes: out.size_bytes,
                derived_from: None,
            });
            ws.links.push(ProvLink {
                link_id: next_link_id(),
                kind: ProvKind::GeneratedBy,
                task_id,
                tuple_id,
            });
        }
        for input in &task.input_tuple_ids {
            ws.links.push(ProvLink {
                link_id: next_link_id(),
                kind: ProvKind::Used,
                task_id,
                tuple_id: *input,
            });
        }
        ws.tasks.push(done);
        Ok((ws, CompleteAck::Committed))
    }

    fn same_completion(&self, task: &Task, std_out: &str, outputs: &[NewTuple]) -> bool {
        if task.std_out != std_out {
            return false;
        }
        let stored = self.outputs_of(task.task_id);
        stored.len() == outputs.len()
            && stored.iter().zip(outputs).all(|(s, o)| {
                s.fields == o.fields && s.raw_file_path == o.raw_file_path && s.size_bytes == o.size_bytes
            })
    }

    /// Books a failed attempt: back to READY while trials remain, else ABORTED.
    pub fn plan_fail(
        &self,
        task_id: TaskId,
        max_retries: u32,
        now: Millis,
    ) -> StoreResult<(WriteSet, TaskStatus)> {
        let task = self.tasks.get(&task_id).ok_or(StoreError::UnknownTask(task_id))?;
        if task.status != TaskStatus::Running {
            return Err(StoreError::IllegalTransition {
                task_id,
                from: task.status,
                to: TaskStatus::Ready,
            });
        }
        let mut t = task.clone();
        t.failure_trials += 1;
        if t.failure_trials < max_retries {
            t.status = TaskStatus::Ready;
            t.start_time = None;
            t.end_time = None;
        } else {
            t.status = TaskStatus::Aborted;
            t.end_time = Some(now.max(task.start_time.unwrap_or(0)));
        }
        let status = t.status;
        Ok((
            WriteSet {
                tasks: vec![t],
                ..WriteSet::default()
            },
            status,
        ))
    }
}
