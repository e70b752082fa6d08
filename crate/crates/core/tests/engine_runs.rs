//! End-to-end runs of the in-process engine.

use std::collections::BTreeSet;

use schaladb::harness::{self, FailureInjection, Fault, Mode, Trigger, WorkloadSpec};
use schaladb::query::{self, Params, QueryId};
use schaladb::{Predicate, ProvKind, StoreClient, TaskStatus};

fn small(n: u64, ms: u64, workers: u32, threads: u32) -> WorkloadSpec {
    let mut s = WorkloadSpec::new(n, ms, workers, threads);
    s.timeout_ms = 60_000;
    s
}

#[test]
fn distributed_run_finishes_every_task_once() {
    let r = harness::run_workload(&small(140, 2, 3, 2)).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    assert_eq!(r.tasks.len(), 140);
    assert!(r.all_finished());
    assert!(r.execution_anomalies().is_empty(), "{:?}", r.execution_anomalies());
    assert!(r.metrics.elapsed_ms > 0.0);
    assert!(r.metrics.access_fraction > 0.0 && r.metrics.access_fraction < 1.0);
    for t in &r.tasks {
        t.check_invariants().unwrap();
    }
}

#[test]
fn centralized_run_finishes_every_task_once() {
    let mut spec = small(70, 2, 2, 2);
    spec.mode = Mode::Centralized;
    let r = harness::run_workload(&spec).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    assert!(r.all_finished());
    assert!(r.execution_anomalies().is_empty());
}

#[test]
fn failing_tasks_are_retried_then_aborted() {
    let mut spec = small(70, 1, 2, 2);
    spec.failure_prob = 0.2;
    spec.max_retries = 2;
    let r = harness::run_workload(&spec).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    for t in &r.tasks {
        assert!(t.status.is_terminal(), "task {} is {}", t.task_id, t.status);
        if t.status == TaskStatus::Aborted {
            assert!(t.failure_trials >= 2);
        }
    }
    assert!(r.tasks.iter().any(|t| t.failure_trials > 0));
}

#[test]
fn abandoned_attempts_are_reclaimed_after_the_lease() {
    let mut spec = small(14, 20, 2, 1);
    spec.costs.lease_floor_ms = 200;
    spec.failures = vec![FailureInjection {
        when: Trigger::AfterMs(0),
        what: Fault::AbandonTasks(vec![1, 2]),
    }];
    let r = harness::run_workload(&spec).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    assert!(r.all_finished());
    assert_eq!(r.attempts[&1], 2);
    assert_eq!(r.executions[&1], 1);
    assert!(r.supervisor.lease_resets >= 2);
}

#[test]
fn queries_run_during_execution_and_provenance_reaches_inputs() {
    let mut spec = small(70, 5, 2, 2);
    spec.query_interval_ms = Some(50);
    let r = harness::run_workload(&spec).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    assert!(r.metrics.queries_run >= 7);
    let snap = query::Snapshot::load(r.store.as_ref(), None).unwrap();
    let last = r.workflow.activities.last().unwrap().activity_id.clone();
    let finals: Vec<_> = snap.tuples.iter().filter(|t| t.activity_id == last).collect();
    assert_eq!(finals.len(), 10);
    let inputs: BTreeSet<u64> = snap
        .tuples
        .iter()
        .filter(|t| t.activity_id == "input")
        .map(|t| t.tuple_id)
        .collect();
    for t in finals {
        let d = query::derivation(&snap, t.tuple_id).unwrap();
        assert!(d.reaches_inputs());
        assert_eq!(d.steps.len(), r.workflow.activities.len() + 1);
        assert!(d.input_tuple_ids.iter().all(|i| inputs.contains(i)));
    }
    let mut p = Params::new();
    p.insert("workflow".into(), r.workflow.workflow_id.clone());
    let q4 = query::run_predefined(r.store.as_ref(), QueryId::Q4, &p, None).unwrap();
    assert_eq!(q4.rows[0][0], schaladb::Scalar::Int(0));
}

#[test]
fn killing_a_connector_fails_over() {
    let mut spec = small(140, 3, 4, 2);
    spec.connectors = 2;
    spec.failures = vec![FailureInjection {
        when: Trigger::AfterFinished(30),
        what: Fault::KillConnector(1),
    }];
    let r = harness::run_workload(&spec).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    assert_eq!(r.injections.len(), 1);
    assert!(r.injections[0].error.is_none());
    assert!(r.all_finished());
    assert!(r.execution_anomalies().is_empty());
}

#[test]
fn standby_supervisor_takes_over() {
    let mut spec = small(140, 3, 2, 2);
    spec.failures = vec![FailureInjection {
        when: Trigger::AfterFinished(20),
        what: Fault::KillSupervisor,
    }];
    let r = harness::run_workload(&spec).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    assert!(r.supervisor.crashed);
    assert!(r.standby.took_over);
    assert!(r.all_finished());
    let baseline = harness::run_workload(&small(140, 3, 2, 2)).unwrap();
    assert_eq!(r.task_set(), baseline.task_set());
}

#[test]
fn killing_a_data_node_loses_no_committed_rows() {
    let mut spec = small(140, 3, 4, 2);
    spec.data_nodes = 2;
    spec.replicate = true;
    spec.failures = vec![FailureInjection {
        when: Trigger::AfterFinished(40),
        what: Fault::KillDataNode(1),
    }];
    let r = harness::run_workload(&spec).unwrap();
    assert!(r.completed(), "{:?}", r.failure);
    let inj = &r.injections[0];
    assert!(inj.error.is_none(), "{:?}", inj.error);
    let (pre, post) = inj.dumps.as_ref().unwrap();
    harness::committed_rows_preserved(pre, post).unwrap();
    let end = r.store.dump_tables().unwrap();
    harness::committed_rows_preserved(pre, &end).unwrap();
    assert!(r.all_finished());
    let used = r.store.links(Predicate::eq("kind", ProvKind::Used.as_str())).unwrap();
    assert_eq!(used.len(), 140);
}
