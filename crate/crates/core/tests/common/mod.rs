//! Random store states and a brute-force reference for the predefined queries.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schaladb::clock::ManualClock;
use schaladb::harness::RISERS_ACTIVITIES;
use schaladb::query::{Params, QueryId};
use schaladb::taskstore::MetadataView;
use schaladb::{
    ActivitySpec, ClusterTopology, DomainTuple, Operator, ProvKind, ProvLink, Scalar, Store, StoreConfig, Task,
    TaskStatus, WorkflowSpec,
};

pub struct RandomState {
    pub store: Arc<Store>,
    pub now: u64,
    pub workers: u32,
    pub workflow_id: String,
    pub params: Params,
}

fn num(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Scalar {
    Scalar::Num((rng.gen_range(lo..hi) * 100.0_f64).round() / 100.0)
}

/// A random mid-run store: a linear workflow, a chain of tasks per input
/// that stops at the first unfinished task, occasional steering-derived
/// inputs, and timestamps scattered around `now`.
pub fn random_state(seed: u64, max_tasks: usize) -> RandomState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let workers = rng.gen_range(1..=4u32);
    let n_act = rng.gen_range(3..=7usize);
    let now: u64 = rng.gen_range(70_000..400_000);
    let started_at = rng.gen_range(0..now);
    // Sometimes the names the queries look up are absent.
    let renamed = rng.gen_bool(0.1);
    let workflow_id = format!("wf{}", seed % 5);
    let activities: Vec<ActivitySpec> = (0..n_act)
        .map(|i| ActivitySpec {
            activity_id: format!("a{}", i + 1),
            name: if renamed {
                format!("Step {}", i + 1)
            } else {
                RISERS_ACTIVITIES[i].to_string()
            },
            operator: Operator::Map,
            command_template: "/run a={a}".into(),
            input_schema: vec!["a".into()],
            output_schema: match i {
                1 => vec!["a", "cx", "cy", "cz", "raw_file_path", "size_bytes"],
                3 => vec!["a", "fl"],
                _ => vec!["a", "x"],
            }
            .into_iter()
            .map(String::from)
            .collect(),
            mean_duration_ms: rng.gen_range(0..5_000),
            workspace: None,
        })
        .collect();
    let workflow = WorkflowSpec {
        workflow_id: workflow_id.clone(),
        edges: (1..n_act).map(|i| (format!("a{i}"), format!("a{}", i + 1))).collect(),
        activities,
        input_schema: vec!["a".into(), "b".into(), "c".into()],
    };

    let clock = Arc::new(ManualClock::new(started_at));
    let store = Arc::new(Store::with_clock(StoreConfig::new(workers, 1, false), clock.clone()).unwrap());
    let topology = ClusterTopology::single_machine(workers, 1, 1, 2);
    store.set_workflow(workflow, Some(topology));

    let n_inputs = rng.gen_range(1..=(max_tasks / n_act).max(1));
    let mut inputs = Vec::new();
    let mut parts: BTreeMap<u32, (Vec<Task>, Vec<DomainTuple>, Vec<ProvLink>)> = BTreeMap::new();
    let mut next_tuple = n_inputs as u64 + 1;
    let mut next_task = 1u64;
    let mut next_link = 1u64;
    for i in 1..=n_inputs as u64 {
        let mut fields = BTreeMap::new();
        fields.insert("a".to_string(), num(&mut rng, 0.0, 3.0));
        fields.insert("b".to_string(), num(&mut rng, 5.0, 40.0));
        fields.insert("c".to_string(), num(&mut rng, 5.0, 30.0));
        inputs.push(DomainTuple {
            tuple_id: i,
            activity_id: "input".into(),
            produced_by_task: None,
            fields,
            raw_file_path: Some(format!("/in/{i}")),
            size_bytes: rng.gen_bool(0.8).then(|| rng.gen_range(1..1_000_000)),
            derived_from: None,
        });
        let mut upstream = inputs.last().unwrap().clone();
        for k in 0..n_act {
            if next_task as usize > max_tasks {
                break;
            }
            let task_id = next_task;
            next_task += 1;
            let worker_id = ((task_id - 1) % workers as u64) as u32 + 1;
            let (tasks, tuples, links) = parts.entry(worker_id).or_default();
            // Occasionally the task consumes a steered copy of its input.
            let mut input = upstream.clone();
            if rng.gen_bool(0.08) {
                let mut f = input.fields.clone();
                f.insert("a".into(), num(&mut rng, 0.0, 3.0));
                let derived = DomainTuple {
                    tuple_id: next_tuple,
                    activity_id: input.activity_id.clone(),
                    produced_by_task: None,
                    fields: f,
                    raw_file_path: input.raw_file_path.clone(),
                    size_bytes: input.size_bytes,
                    derived_from: Some(input.tuple_id),
                };
                next_tuple += 1;
                links.push(ProvLink {
                    link_id: next_link,
                    kind: ProvKind::SteeredBy,
                    task_id: 1,
                    tuple_id: derived.tuple_id,
                });
                next_link += 1;
                tuples.push(derived.clone());
                input = derived;
            }
            let status = match rng.gen_range(0..100) {
                0..=54 => TaskStatus::Finished,
                55..=69 => TaskStatus::Running,
                70..=87 => TaskStatus::Ready,
                _ => TaskStatus::Aborted,
            };
            let start = rng.gen_range(now.saturating_sub(130_000)..=now + 5_000);
            let (start_time, end_time) = match status {
                TaskStatus::Ready => (None, None),
                TaskStatus::Running => (Some(start), None),
                TaskStatus::Finished => (Some(start), Some(start + rng.gen_range(0..70_000))),
                TaskStatus::Aborted => {
                    if rng.gen_bool(0.2) {
                        (None, Some(start))
                    } else {
                        (Some(start), Some(start + rng.gen_range(0..30_000)))
                    }
                }
            };
            let failure_trials = match status {
                TaskStatus::Aborted => rng.gen_range(1..=3),
                _ => {
                    if rng.gen_bool(0.15) {
                        rng.gen_range(1..=2)
                    } else {
                        0
                    }
                }
            };
            tasks.push(Task {
                task_id,
                activity_id: format!("a{}", k + 1),
                workflow_id: workflow_id.clone(),
                worker_id,
                core_slot: rng.gen_range(1..=2),
                command_line: format!("/run a={}", input.fields["a"]),
                workspace: String::new(),
                failure_trials,
                std_out: String::new(),
                start_time,
                end_time,
                status,
                input_tuple_ids: vec![input.tuple_id],
            });
            if status != TaskStatus::Finished {
                break;
            }
            let mut fields = input.fields.clone();
            let mut raw = None;
            let mut size = None;
            match k {
                1 => {
                    for f in ["cx", "cy", "cz"] {
                        fields.insert(f.into(), num(&mut rng, 0.0, 50.0));
                    }
                    raw = Some(format!("/ws/t{task_id}.raw"));
                    size = rng.gen_bool(0.9).then(|| rng.gen_range(1..100_000));
                }
                3 => {
                    if rng.gen_bool(0.95) {
                        fields.insert("fl".into(), num(&mut rng, 0.0, 1.0));
                    }
                }
                _ => {
                    fields.insert("x".into(), num(&mut rng, 0.0, 10.0));
                }
            }
            let out = DomainTuple {
                tuple_id: next_tuple,
                activity_id: format!("a{}", k + 1),
                produced_by_task: Some(task_id),
                fields,
                raw_file_path: raw,
                size_bytes: size,
                derived_from: None,
            };
            next_tuple += 1;
            for (kind, tuple_id) in [(ProvKind::GeneratedBy, out.tuple_id), (ProvKind::Used, input.tuple_id)] {
                links.push(ProvLink {
                    link_id: next_link,
                    kind,
                    task_id,
                    tuple_id,
                });
                next_link += 1;
            }
            tuples.push(out.clone());
            upstream = out;
        }
    }
    store.load_inputs(inputs);
    for (pid, (mut tasks, tuples, links)) in parts {
        tasks.sort_by_key(|t| t.task_id);
        store.load_partition_rows(pid, tasks, tuples, links).unwrap();
    }
    clock.set_ms(now);

    let mut params = Params::new();
    params.insert("hostname".into(), format!("node{}", rng.gen_range(1..=workers + 1)));
    params.insert(
        "workflow".into(),
        if rng.gen_bool(0.9) { workflow_id.clone() } else { "other".into() },
    );
    match rng.gen_range(0..3) {
        0 => {}
        1 => {
            params.insert("threshold".into(), "0.3".into());
        }
        _ => {
            params.insert("threshold".into(), "0.8".into());
        }
    }
    RandomState {
        store,
        now,
        workers,
        workflow_id,
        params,
    }
}

// ---- brute-force reference ----------------------------------------------------------

pub struct Tables {
    pub tasks: Vec<Task>,
    pub tuples: Vec<DomainTuple>,
    pub links: Vec<ProvLink>,
    pub meta: MetadataView,
    tuple_at: BTreeMap<u64, usize>,
    used_by: BTreeMap<u64, Vec<u64>>,
}

impl Tables {
    pub fn load(store: &Store) -> Tables {
        let d = store.dump_tables().unwrap();
        let tuple_at = d.tuples.iter().enumerate().map(|(i, t)| (t.tuple_id, i)).collect();
        let mut used_by: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for l in d.links.iter().filter(|l| l.kind == ProvKind::Used) {
            used_by.entry(l.task_id).or_default().push(l.tuple_id);
        }
        Tables {
            tasks: d.tasks,
            tuples: d.tuples,
            links: d.links,
            meta: store.metadata_view(),
            tuple_at,
            used_by,
        }
    }

    fn used(&self, task: u64) -> &[u64] {
        self.used_by.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    fn host(&self, worker: u32) -> String {
        match &self.meta.topology {
            Some(t) => t.hostname_of_worker(worker),
            None => format!("worker{worker}"),
        }
    }

    fn activity_name(&self, id: &str) -> Option<String> {
        let wf = self.meta.workflow.as_ref()?;
        wf.activities.iter().find(|a| a.activity_id == id).map(|a| a.name.clone())
    }

    fn activity_id_named(&self, name: &str) -> Option<String> {
        let wf = self.meta.workflow.as_ref()?;
        wf.activities.iter().find(|a| a.name == name).map(|a| a.activity_id.clone())
    }

    fn tuple(&self, id: u64) -> Option<&DomainTuple> {
        self.tuple_at.get(&id).map(|i| &self.tuples[*i])
    }
}

fn in_window(t: Option<u64>, now: u64) -> bool {
    matches!(t, Some(v) if v as i64 >= now as i64 - 60_000 && v <= now)
}

fn active(t: &Task) -> bool {
    matches!(t.status, TaskStatus::Ready | TaskStatus::Running)
}

fn s(v: &str) -> Scalar {
    Scalar::Str(v.to_string())
}

fn int(v: i64) -> Scalar {
    Scalar::Int(v)
}

fn field(t: &DomainTuple, name: &str) -> Scalar {
    match name {
        "raw_file_path" => t.raw_file_path.clone().map(Scalar::Str).unwrap_or(Scalar::Null),
        other => t.fields.get(other).cloned().unwrap_or(Scalar::Null),
    }
}

fn ancestors(tables: &Tables, id: u64) -> BTreeSet<u64> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![id];
    while let Some(cur) = stack.pop() {
        let Some(t) = tables.tuple(cur) else { continue };
        let mut parents: Vec<u64> = t.derived_from.into_iter().collect();
        if let Some(task) = t.produced_by_task {
            parents.extend(tables.used(task).iter().copied());
        }
        for p in parents {
            if p != id && seen.insert(p) {
                stack.push(p);
            }
        }
    }
    seen
}

fn keep_top<K: Ord>(counts: BTreeMap<K, i64>) -> BTreeMap<K, i64> {
    let top = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().filter(|(_, n)| *n == top).collect()
}

/// Columns and rows of `q` computed by direct loops over the tables.
pub fn reference(q: QueryId, params: &Params, tables: &Tables, now: u64) -> (Vec<String>, Vec<Vec<Scalar>>) {
    let cols = |c: &[&str]| c.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match q {
        QueryId::Q1 => {
            let mut groups: BTreeMap<(String, String), (i64, i64, i64)> = BTreeMap::new();
            for t in tables.tasks.iter().filter(|t| in_window(t.start_time, now)) {
                let g = groups.entry((tables.host(t.worker_id), t.status.as_str().to_string())).or_default();
                g.0 += 1;
                g.1 += t.end_time.is_some() as i64;
                g.2 += t.failure_trials as i64;
            }
            let rows = groups
                .into_iter()
                .map(|((h, st), (a, b, c))| vec![s(&h), s(&st), int(a), int(b), int(c)])
                .collect();
            (cols(&["hostname", "status", "started", "finished", "failure_trials"]), rows)
        }
        QueryId::Q2 => {
            let host = &params["hostname"];
            let mut rows: Vec<Vec<Scalar>> = Vec::new();
            for t in &tables.tasks {
                if !in_window(t.end_time, now) || &tables.host(t.worker_id) != host {
                    continue;
                }
                let sizes: Vec<i64> = tables
                    .used(t.task_id)
                    .iter()
                    .filter_map(|id| tables.tuple(*id).and_then(|d| d.size_bytes))
                    .map(|v| v as i64)
                    .collect();
                let bytes = if sizes.is_empty() { Scalar::Null } else { int(sizes.iter().sum()) };
                rows.push(vec![int(t.task_id as i64), s(t.status.as_str()), bytes]);
            }
            rows.sort_by(|a, b| b[2].cmp(&a[2]).then(a[1].cmp(&b[1])).then(a[0].cmp(&b[0])));
            (cols(&["task_id", "status", "bytes"]), rows)
        }
        QueryId::Q3 => {
            let mut counts: BTreeMap<String, i64> = BTreeMap::new();
            for t in &tables.tasks {
                let failed = t.status == TaskStatus::Aborted
                    || (t.status == TaskStatus::Finished && t.failure_trials > 0);
                if failed && in_window(t.end_time, now) {
                    *counts.entry(tables.host(t.worker_id)).or_default() += 1;
                }
            }
            let rows = keep_top(counts).into_iter().map(|(h, n)| vec![s(&h), int(n)]).collect();
            (cols(&["hostname", "failed_tasks"]), rows)
        }
        QueryId::Q4 => {
            let wf = &params["workflow"];
            let rows = match &tables.meta.workflow {
                Some(w) if &w.workflow_id == wf => {
                    let n = tables.tasks.iter().filter(|t| &t.workflow_id == wf && active(t)).count();
                    vec![vec![int(n as i64)]]
                }
                _ => Vec::new(),
            };
            (cols(&["tasks_left"]), rows)
        }
        QueryId::Q5 => {
            let mut counts: BTreeMap<String, i64> = BTreeMap::new();
            if let Some(w) = &tables.meta.workflow {
                let long_running = matches!(tables.meta.started_at, Some(s) if (s as i64) < now as i64 - 60_000)
                    && tables.meta.completed_at.is_none();
                if long_running {
                    for t in tables.tasks.iter().filter(|t| active(t) && t.workflow_id == w.workflow_id) {
                        if let Some(name) = tables.activity_name(&t.activity_id) {
                            *counts.entry(name).or_default() += 1;
                        }
                    }
                }
            }
            let rows = keep_top(counts).into_iter().map(|(a, n)| vec![s(&a), int(n)]).collect();
            (cols(&["activity", "unfinished_tasks"]), rows)
        }
        QueryId::Q6 => {
            let mut by_act: BTreeMap<String, Vec<i64>> = BTreeMap::new();
            for t in tables.tasks.iter().filter(|t| t.status == TaskStatus::Finished) {
                let (Some(a), Some(b)) = (t.start_time, t.end_time) else { continue };
                by_act.entry(t.activity_id.clone()).or_default().push(b as i64 - a as i64);
            }
            let active_acts: BTreeSet<&str> =
                tables.tasks.iter().filter(|t| active(t)).map(|t| t.activity_id.as_str()).collect();
            let mut rows = Vec::new();
            for (act, durs) in by_act {
                let has_active = active_acts.contains(act.as_str());
                let Some(name) = tables.activity_name(&act) else { continue };
                if !has_active {
                    continue;
                }
                let avg = durs.iter().map(|d| *d as f64).sum::<f64>() / durs.len() as f64;
                let max = *durs.iter().max().unwrap();
                rows.push(vec![s(&act), s(&name), Scalar::Num(avg), int(max)]);
            }
            rows.sort_by(|a, b| b[2].cmp(&a[2]).then(b[3].cmp(&a[3])).then(a[0].cmp(&b[0])));
            (cols(&["activity_id", "activity", "avg_ms", "max_ms"]), rows)
        }
        QueryId::Q7 => {
            let columns = cols(&["cx", "cy", "cz", "raw_file_path", "fl"]);
            let threshold: f64 = params.get("threshold").map(|t| t.parse().unwrap()).unwrap_or(0.5);
            let (Some(wear), Some(pre)) = (
                tables.activity_id_named("Calculate Wear and Tear"),
                tables.activity_id_named("Pre-Processing"),
            ) else {
                return (columns, Vec::new());
            };
            let durations = |act: Option<&str>| -> Vec<f64> {
                tables
                    .tasks
                    .iter()
                    .filter(|t| t.status == TaskStatus::Finished && act.is_none_or(|a| t.activity_id == a))
                    .filter_map(|t| Some(t.end_time? as f64 - t.start_time? as f64))
                    .collect()
            };
            let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            let slow = matches!((mean(durations(Some(&wear))), mean(durations(None))), (Some(w), Some(a)) if w > a);
            if !slow {
                return (columns, Vec::new());
            }
            let mut hits: Vec<(u64, u64, Vec<Scalar>)> = Vec::new();
            for f in &tables.tuples {
                let fl = f.fields.get("fl").and_then(|v| v.as_f64());
                if f.activity_id != wear || f.derived_from.is_some() || !fl.is_some_and(|v| v > threshold) {
                    continue;
                }
                for p in ancestors(tables, f.tuple_id) {
                    let Some(pt) = tables.tuple(p) else { continue };
                    if pt.activity_id != pre {
                        continue;
                    }
                    hits.push((
                        p,
                        f.tuple_id,
                        vec![
                            field(pt, "cx"),
                            field(pt, "cy"),
                            field(pt, "cz"),
                            field(pt, "raw_file_path"),
                            field(f, "fl"),
                        ],
                    ));
                }
            }
            hits.sort_by_key(|h| (h.0, h.1));
            (columns, hits.into_iter().map(|h| h.2).collect())
        }
    }
}

/// Canonical bytes of a result for equality checks.
pub fn canonical(columns: &[String], rows: &[Vec<Scalar>]) -> String {
    serde_json::to_string(&(columns, rows)).unwrap()
}
