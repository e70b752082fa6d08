use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TaskId, TaskStatus};

pub type StoreResult<T> = Result<T, StoreError>;

/// Errors surfaced by the store and by everything that talks to it.
///
/// The type is serializable because it crosses the wire inside the
/// `"error"` member of a protocol response.
#[derive(Debug, Clone, Error, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum StoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("worker id {worker_id} out of range 1..={workers}")]
    WorkerOutOfRange { worker_id: u32, workers: u32 },
    #[error("duplicate task id {0}")]
    DuplicateTask(TaskId),
    #[error("unknown activity {0}")]
    UnknownActivity(String),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown field {0}")]
    UnknownField(String),
    #[error("illegal transition for task {task_id}: {from:?} -> {to:?}")]
    IllegalTransition {
        task_id: TaskId,
        from: TaskStatus,
        to: TaskStatus,
    },
    #[error("unknown table {0}")]
    UnknownTable(String),
    #[error("partition {0} unavailable: no live copy")]
    PartitionUnavailable(u32),
    #[error("request routed to data node d{node} which does not own partition {partition}")]
    StaleRoute { node: u32, partition: u32 },
    #[error("connector c{0} is down")]
    ConnectorDown(u32),
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("supervisor lease lost (epoch {0} is stale)")]
    LeaseLost(u64),
    #[error("generation cursor conflict: expected next task id {expected}, store has {actual}")]
    CursorConflict { expected: TaskId, actual: TaskId },
    #[error("{0}")]
    Invalid(String),
    #[error("database not created")]
    DatabaseNotCreated,
    #[error("wrong engine state: {0}")]
    WrongState(String),
}

impl StoreError {
    /// Errors that mean "this route is broken", which the failover client
    /// answers by switching to a secondary connector.
    pub fn is_transport(&self) -> bool {
        matches!(self, StoreError::ConnectorDown(_) | StoreError::Unavailable(_))
    }
}
