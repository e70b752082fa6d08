//! Queries, claims and steering against the twelve-task fixture.

use std::collections::BTreeMap;

use schaladb::fixtures;
use schaladb::predicate::CmpOp;
use schaladb::query::{self, Params, Plan, QueryId, Snapshot, Source};
use schaladb::{Predicate, ProvKind, Scalar, StoreClient, TaskStatus};

fn params(pairs: &[(&str, &str)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn num(v: &Scalar) -> f64 {
    v.as_f64().expect("numeric")
}

#[test]
fn ready_snapshot_and_activity_filter() {
    let (store, _) = fixtures::store().unwrap();
    let ready = store.tasks(Predicate::eq("status", "READY")).unwrap();
    let ids: Vec<u64> = ready.iter().map(|t| t.task_id).collect();
    assert_eq!(ids, vec![6, 9, 10, 12]);
    let pred = Predicate::parse("activity_id = 2 AND status = FINISHED").unwrap();
    let rows = store.tasks(pred).unwrap();
    assert_eq!(rows.iter().map(|t| t.task_id).collect::<Vec<_>>(), vec![7]);
}

#[test]
fn claims_follow_task_id_order() {
    let (store, _) = fixtures::store().unwrap();
    let one = store.claim_ready(1, 1, None).unwrap();
    assert_eq!(one.iter().map(|t| t.task_id).collect::<Vec<_>>(), vec![9]);
    assert_eq!(one[0].status, TaskStatus::Running);
    let two = store.claim_ready(2, 10, None).unwrap();
    assert_eq!(two.iter().map(|t| t.task_id).collect::<Vec<_>>(), vec![6, 10, 12]);
    assert!(store.claim_ready(1, 5, None).unwrap().is_empty());
}

#[test]
fn finished_count_and_average_duration() {
    let (store, _) = fixtures::store().unwrap();
    let snap = Snapshot::load(store.as_ref(), None).unwrap();
    let count = Plan::scan(Source::WorkQueue, Predicate::eq("status", "FINISHED")).aggregate(
        &[],
        vec![query::Aggregate::new(query::AggFunc::CountAll, None, "n")],
    );
    let r = query::run_plan(&count, &snap).unwrap();
    assert_eq!(r.rows, vec![vec![Scalar::Int(4)]]);

    // Brute force over the snapshot.
    let durations: Vec<f64> = snap
        .tasks
        .iter()
        .filter(|t| t.activity_id == "1" && t.status == TaskStatus::Finished)
        .map(|t| (t.end_time.unwrap() - t.start_time.unwrap()) as f64)
        .collect();
    assert_eq!(durations, vec![54_000.0, 55_000.0, 61_000.0]);
    let oracle = durations.iter().sum::<f64>() / 3.0;
    let q6 = query::run_predefined_on(QueryId::Q6, &Params::new(), &snap).unwrap();
    assert_eq!(q6.columns, vec!["activity_id", "activity", "avg_ms", "max_ms"]);
    assert_eq!(q6.rows.len(), 2, "{q6}");
    assert_eq!(q6.rows[0][0], Scalar::from("1"));
    assert!((num(&q6.rows[0][2]) - oracle).abs() < 1e-9);
    assert!((num(&q6.rows[0][2]) / 1000.0 - 56.667).abs() < 1e-3);
    assert_eq!(num(&q6.rows[0][3]), 61_000.0);
    assert_eq!(q6.rows[1][0], Scalar::from("2"));
    assert_eq!(num(&q6.rows[1][2]), 14_000.0);
    assert_eq!(num(&q6.rows[1][3]), 14_000.0);
}

#[test]
fn tasks_left_and_no_failures() {
    let (store, _) = fixtures::store().unwrap();
    let q4 = query::run_predefined(store.as_ref(), QueryId::Q4, &params(&[("workflow", "wf1")]), None).unwrap();
    assert_eq!(q4.rows, vec![vec![Scalar::Int(8)]]);
    let unknown = query::run_predefined(store.as_ref(), QueryId::Q4, &params(&[("workflow", "nope")]), None).unwrap();
    assert!(unknown.is_empty());
    let q3 = query::run_predefined(store.as_ref(), QueryId::Q3, &Params::new(), None).unwrap();
    assert!(q3.is_empty());
    assert!(query::run_predefined(store.as_ref(), QueryId::Q2, &Params::new(), None).is_err());
}

#[test]
fn other_predefined_queries_run() {
    let (store, _) = fixtures::store().unwrap();
    let q1 = query::run_predefined(store.as_ref(), QueryId::Q1, &Params::new(), None).unwrap();
    // Started in [15 s, 75 s]: tasks 5, 7, 11 on node1 and 8 on node2.
    let started: i64 = q1.rows.iter().map(|r| num(&r[2]) as i64).sum();
    assert_eq!(started, 4, "{q1}");
    let q2 = query::run_predefined(store.as_ref(), QueryId::Q2, &params(&[("hostname", "node1")]), None).unwrap();
    // Finished in [15 s, 75 s] on node1: tasks 1, 3 and 7.
    assert_eq!(q2.rows.len(), 3, "{q2}");
    let q5 = query::run_predefined(store.as_ref(), QueryId::Q5, &Params::new(), None).unwrap();
    // Unfinished: act1 1, act2 3, act3 4.
    assert_eq!(q5.rows, vec![vec![Scalar::from("act3"), Scalar::Int(4)]]);
    let q7 = query::run_predefined(store.as_ref(), QueryId::Q7, &Params::new(), None).unwrap();
    assert!(q7.is_empty());
}

#[test]
fn steering_update_rewrites_matching_ready_tasks() {
    let (store, _) = fixtures::store().unwrap();
    let before = store.get_task(11).unwrap();
    let mut set = BTreeMap::new();
    set.insert("a".to_string(), Scalar::Num(9.9));
    let pred = Predicate::cmp("a", CmpOp::Lt, 0.6);
    let action = store.steer_update("3", pred.clone(), set.clone()).unwrap();
    assert_eq!(action.affected_task_ids, vec![9, 10, 12]);
    assert_eq!(store.get_task(11).unwrap(), before);
    for id in [9, 10, 12] {
        let t = store.get_task(id).unwrap();
        assert!(t.command_line.starts_with("/run a=9.9 "), "{}", t.command_line);
        let inputs = store.fetch_inputs(id).unwrap();
        assert_eq!(inputs[0].fields["a"], Scalar::Num(9.9));
        assert_eq!(inputs[0].derived_from, Some(id));
    }
    let steered = store.links(Predicate::eq("kind", ProvKind::SteeredBy.as_str())).unwrap();
    assert_eq!(steered.len(), 3);
    assert!(steered.iter().all(|l| l.task_id == action.action_id));
    let again = store.steer_update("3", pred, set).unwrap();
    assert!(again.affected_task_ids.is_empty());
}

#[test]
fn steering_prune_aborts_matching_ready_tasks() {
    let (store, _) = fixtures::store().unwrap();
    let action = store.steer_prune("3", Predicate::cmp("a", CmpOp::Gt, 0.5)).unwrap();
    assert_eq!(action.affected_task_ids, vec![9, 12]);
    for id in [9, 12] {
        let t = store.get_task(id).unwrap();
        assert_eq!(t.status, TaskStatus::Aborted);
        assert_eq!(t.std_out, "pruned by steering");
    }
    assert_eq!(store.get_task(10).unwrap().status, TaskStatus::Ready);
    let none = store.steer_prune("1", Predicate::True).unwrap();
    assert!(none.affected_task_ids.is_empty());
}
