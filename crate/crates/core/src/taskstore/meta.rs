//! The replicated metadata row: workflow, topology, workflow inputs,
//! generation cursor, supervisor lease and steering log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::model::{ClusterTopology, DomainTuple, Millis, SteeringAction, TaskId, TupleId, WorkflowSpec};
use crate::taskstore::placement::PartitionPlacement;

/// Generation progress, persisted so a standby supervisor resumes exactly
/// where the previous one stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationCursor {
    /// Next worker id in the circular assignment, in `1..=W`.
    pub next_worker: u32,
    pub next_task_id: TaskId,
    /// Upstream tuples already turned into tasks, per downstream activity.
    pub materialized: BTreeMap<String, BTreeSet<TupleId>>,
    /// REDUCE activities whose single task has been generated.
    pub reduced: BTreeSet<String>,
}

impl Default for GenerationCursor {
    fn default() -> Self {
        GenerationCursor {
            next_worker: 1,
            next_task_id: 1,
            materialized: BTreeMap::new(),
            reduced: BTreeSet::new(),
        }
    }
}

impl GenerationCursor {
    pub fn is_materialized(&self, activity_id: &str, tuple_id: TupleId) -> bool {
        self.materialized
            .get(activity_id)
            .is_some_and(|s| s.contains(&tuple_id))
    }
}

/// Cursor delta committed together with a generated batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CursorAdvance {
    pub next_worker: u32,
    pub next_task_id: TaskId,
    #[serde(default)]
    pub materialized: BTreeMap<String, Vec<TupleId>>,
    #[serde(default)]
    pub reduced: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisorLease {
    pub holder: Option<String>,
    pub epoch: u64,
    pub heartbeat_ms: Millis,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub workflow: Option<WorkflowSpec>,
    pub topology: Option<ClusterTopology>,
    pub inputs: BTreeMap<TupleId, DomainTuple>,
    pub cursor: GenerationCursor,
    pub lease: SupervisorLease,
    pub steering: Vec<SteeringAction>,
    pub started_at: Option<Millis>,
    pub completed_at: Option<Millis>,
}

/// Read-only view of the metadata table as returned by `snapshot(metadata)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataView {
    pub workflow: Option<WorkflowSpec>,
    pub topology: Option<ClusterTopology>,
    pub input_count: usize,
    pub next_worker: u32,
    pub next_task_id: TaskId,
    pub reduced: Vec<String>,
    /// Upstream tuples already turned into tasks, per activity.
    #[serde(default)]
    pub materialized: BTreeMap<String, usize>,
    pub lease: SupervisorLease,
    pub steering: Vec<SteeringAction>,
    pub started_at: Option<Millis>,
    pub completed_at: Option<Millis>,
    pub placements: Vec<PartitionPlacement>,
    pub now_ms: Millis,
}
