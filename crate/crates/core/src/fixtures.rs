//! A small, fully known store state: a three-activity workflow on two
//! workers, twelve tasks mid-run. Used by tests, the CLI demo and the HTTP
//! fixture server.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::clock::ManualClock;
use crate::error::StoreResult;
use crate::model::{
    ActivitySpec, ClusterTopology, DomainTuple, Millis, Operator, ProvKind, ProvLink, Scalar, Task, TaskStatus,
    WorkflowSpec,
};
use crate::taskstore::{Store, StoreConfig};

pub const WORKFLOW_ID: &str = "wf1";

/// Seconds after the engine epoch, as milliseconds.
const fn s(sec: u64) -> Millis {
    sec * 1000
}

/// Default evaluation time for the fixture: 75 s after the epoch.
pub const NOW: Millis = s(75);

/// Tuple ids of task outputs start here; input tuple `i` feeds task `i`.
pub const OUTPUT_TUPLE_BASE: u64 = 100;

struct Row {
    id: u64,
    act: u32,
    worker: u32,
    core: u32,
    abc: (f64, f64, f64),
    out: Option<(f64, f64)>,
    start: Option<u64>,
    end: Option<u64>,
    status: TaskStatus,
}

const fn row(
    id: u64,
    act: u32,
    worker: u32,
    core: u32,
    abc: (f64, f64, f64),
    out: Option<(f64, f64)>,
    start: Option<u64>,
    end: Option<u64>,
    status: TaskStatus,
) -> Row {
    Row {
        id,
        act,
        worker,
        core,
        abc,
        out,
        start,
        end,
        status,
    }
}

use TaskStatus::{Finished as F, Ready as R, Running as U};

const ROWS: [Row; 12] = [
    row(1, 1, 1, 1, (1.3, 27.75, 16.21), Some((18.71, 6.77)), Some(4), Some(58), F),
    row(3, 1, 1, 2, (0.67, 19.18, 24.26), Some((4.58, 0.39)), Some(4), Some(59), F),
    row(5, 2, 1, 1, (1.9, 17.96, 23.92), None, Some(60), None, U),
    row(7, 2, 1, 2, (2.73, 35.74, 24.55), Some((1.74, 7.17)), Some(59), Some(73), F),
    row(9, 3, 1, 1, (0.55, 29.48, 16.66), None, None, None, R),
    row(11, 3, 1, 2, (2.6, 30.1, 13.66), None, Some(73), None, U),
    row(2, 1, 2, 1, (1.49, 6.64, 9.22), None, Some(4), None, U),
    row(4, 1, 2, 2, (0.17, 30.65, 12.61), Some((8.08, 8.5)), Some(3), Some(64), F),
    row(6, 2, 2, 1, (0.54, 23.45, 24.57), None, None, None, R),
    row(8, 2, 2, 2, (2.2, 13.87, 19.84), None, Some(65), None, U),
    row(10, 3, 2, 1, (0.48, 18.39, 16.79), None, None, None, R),
    row(12, 3, 2, 2, (0.59, 15.67, 13.06), None, None, None, R),
];

fn fields(pairs: &[(&str, f64)]) -> BTreeMap<String, Scalar> {
    pairs.iter().map(|(k, v)| (k.to_string(), Scalar::Num(*v))).collect()
}

pub fn workflow() -> WorkflowSpec {
    let act = |n: u32| ActivitySpec {
        activity_id: n.to_string(),
        name: format!("act{n}"),
        operator: Operator::Map,
        command_template: "/run a={a} b={b} c={c}".into(),
        input_schema: vec!["a".into(), "b".into(), "c".into()],
        output_schema: vec!["x".into(), "y".into()],
        mean_duration_ms: 0,
        workspace: Some(format!("/data/act{n}")),
    };
    WorkflowSpec {
        workflow_id: WORKFLOW_ID.into(),
        activities: (1..=3).map(act).collect(),
        edges: vec![("1".into(), "2".into()), ("2".into(), "3".into())],
        input_schema: vec!["a".into(), "b".into(), "c".into()],
    }
}

pub fn topology() -> ClusterTopology {
    ClusterTopology::single_machine(2, 1, 1, 2)
}

/// Builds the fixture store (two partitions on one data node, no replica)
/// and returns it with its clock, set to [`NOW`].
pub fn store() -> StoreResult<(Arc<Store>, Arc<ManualClock>)> {
    let clock = Arc::new(ManualClock::new(s(3)));
    let store = Arc::new(Store::with_clock(StoreConfig::new(2, 1, false), clock.clone())?);
    store.set_workflow(workflow(), Some(topology()));

    let mut inputs = Vec::new();
    let mut parts: BTreeMap<u32, (Vec<Task>, Vec<DomainTuple>, Vec<ProvLink>)> = BTreeMap::new();
    let mut link_id = 1;
    for r in &ROWS {
        let (a, b, c) = r.abc;
        inputs.push(DomainTuple {
            tuple_id: r.id,
            activity_id: "input".into(),
            produced_by_task: None,
            fields: fields(&[("a", a), ("b", b), ("c", c)]),
            raw_file_path: None,
            size_bytes: None,
            derived_from: None,
        });
        let (tasks, tuples, links) = parts.entry(r.worker).or_default();
        let std_out = r.out.map(|(x, y)| format!("x={x} y={y}")).unwrap_or_default();
        tasks.push(Task {
            task_id: r.id,
            activity_id: r.act.to_string(),
            workflow_id: WORKFLOW_ID.into(),
            worker_id: r.worker,
            core_slot: r.core,
            command_line: format!("/run a={a} b={b} c={c}"),
            workspace: format!("/data/act{}", r.act),
            failure_trials: 0,
            std_out,
            start_time: r.start.map(s),
            end_time: r.end.map(s),
            status: r.status,
            input_tuple_ids: vec![r.id],
        });
        if let Some((x, y)) = r.out {
            let out_id = OUTPUT_TUPLE_BASE + r.id;
            tuples.push(DomainTuple {
                tuple_id: out_id,
                activity_id: r.act.to_string(),
                produced_by_task: Some(r.id),
                fields: fields(&[("x", x), ("y", y)]),
                raw_file_path: None,
                size_bytes: None,
                derived_from: None,
            });
            for (kind, tuple_id) in [(ProvKind::GeneratedBy, out_id), (ProvKind::Used, r.id)] {
                links.push(ProvLink {
                    link_id,
                    kind,
                    task_id: r.id,
                    tuple_id,
                });
                link_id += 1;
            }
        }
    }
    store.load_inputs(inputs);
    for (pid, (mut tasks, tuples, links)) in parts {
        tasks.sort_by_key(|t| t.task_id);
        store.load_partition_rows(pid, tasks, tuples, links)?;
    }
    clock.set_ms(NOW);
    Ok((store, clock))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predicate::Predicate;

    #[test]
    fn fixture_matches_its_table() {
        let (store, _) = store().unwrap();
        let tasks = store.snapshot_tasks(&Predicate::True).unwrap();
        assert_eq!(tasks.len(), 12);
        for t in &tasks {
            assert_eq!(store.partition_of_task(t.task_id), Some(t.worker_id));
            t.check_invariants().unwrap();
        }
        let finished: Vec<u64> = tasks
            .iter()
            .filter(|t| t.status == TaskStatus::Finished)
            .map(|t| t.task_id)
            .collect();
        assert_eq!(finished, vec![1, 3, 4, 7]);
        assert_eq!(store.now_ms(), NOW);
    }
}
