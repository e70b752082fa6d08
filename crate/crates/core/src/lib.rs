//! Many-task workflow execution driven by a partitioned, replicated in-memory store.
//!
//! The work queue is hash partitioned by worker id: worker `i` only ever claims
//! tasks from partition `i`. Each partition lives on a primary data node and is
//! synchronously mirrored to one replica. The same store holds domain tuples and
//! provenance links, so runtime queries and steering actions see exactly the
//! state the scheduler works from.
//!
//! Layout:
//!
//! - [`model`]: workflow, task, tuple and provenance types plus workflow validation.
//! - [`taskstore`]: partitions, placement, replication, failover and access timing.
//! - [`protocol`]: request/response messages and the TCP and in-process transports.
//! - [`connector`]: broker relays, worker-to-connector distribution and failover.
//! - [`supervisor`]: task generation, circular worker assignment and takeover.
//! - [`worker`]: claim/execute/commit loop and output extraction.
//! - [`query`]: relational evaluator over snapshots, predefined queries and provenance.
//! - [`harness`]: workload generation, engine runs, centralized baseline and experiments.

pub mod clock;
pub mod connector;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod model;
pub mod predicate;
pub mod protocol;
pub mod query;
pub mod supervisor;
pub mod taskstore;
pub mod worker;

pub use error::{StoreError, StoreResult};
pub use model::{
    ActivitySpec, ClusterTopology, DomainTuple, Operator, ProvKind, ProvLink, Scalar, SteeringAction,
    SteeringKind, Task, TaskStatus, WorkflowSpec,
};
pub use predicate::Predicate;
pub use protocol::{Request, Response, StoreApi, StoreClient};
pub use taskstore::{Store, StoreConfig};
