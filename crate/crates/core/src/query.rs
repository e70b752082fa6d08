//! Runtime analytics: a small relational evaluator over store snapshots, the
//! predefined monitoring queries Q1–Q7, a one-line SQL subset and provenance
//! derivation paths.
//!
//! Every evaluation first takes a [`Snapshot`] (read-committed per partition)
//! and then runs entirely in memory, so queries never hold store locks.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{StoreError, StoreResult};
use crate::model::{
    ActionId, DomainTuple, Millis, ProvKind, ProvLink, Scalar, ScalarRef, Task, TaskId, TaskStatus, TupleId,
};
use crate::predicate::{CmpOp, Predicate, Row};
use crate::protocol::{StoreApi, StoreClient};
use crate::taskstore::MetadataView;

/// Length of the "last minute" window used by Q1, Q2, Q3 and Q5.
pub const WINDOW_MS: u64 = 60_000;

/// Pre-Processing outputs, joined by Q7.
pub const PRE_PROCESSING: &str = "Pre-Processing";
/// Wear computation, filtered on `fl` by Q7.
pub const WEAR_AND_TEAR: &str = "Calculate Wear and Tear";

/// All tables as of one evaluation.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub tasks: Vec<Task>,
    pub tuples: Vec<DomainTuple>,
    pub links: Vec<ProvLink>,
    pub meta: MetadataView,
    pub now: Millis,
}

impl Snapshot {
    /// Reads every table through `client`. `now` defaults to the store clock.
    pub fn load<C: StoreApi + ?Sized>(client: &C, now: Option<Millis>) -> StoreResult<Snapshot> {
        let meta = client.metadata()?;
        let tasks = client.tasks(Predicate::True)?;
        let tuples = client.tuples(Predicate::True)?;
        let links = client.links(Predicate::True)?;
        Ok(Snapshot {
            now: now.unwrap_or(meta.now_ms),
            tasks,
            tuples,
            links,
            meta,
        })
    }

    pub fn worker_count(&self) -> u32 {
        self.meta.placements.len() as u32
    }

    pub fn hostname_of(&self, worker_id: u32) -> String {
        match &self.meta.topology {
            Some(t) => t.hostname_of_worker(worker_id),
            None => format!("worker{worker_id}"),
        }
    }

    /// Activity id for a display name, if the workflow has one.
    pub fn activity_named(&self, name: &str) -> Option<String> {
        self.meta
            .workflow
            .as_ref()?
            .activity_by_name(name)
            .map(|a| a.activity_id.clone())
    }

    fn tuple_columns(&self) -> Vec<String> {
        let mut fields: BTreeSet<String> = self.tuples.iter().flat_map(|t| t.fields.keys().cloned()).collect();
        if let Some(wf) = &self.meta.workflow {
            fields.extend(wf.input_schema.iter().cloned());
            for a in &wf.activities {
                fields.extend(a.output_schema.iter().cloned());
            }
        }
        let mut cols: Vec<String> = TUPLE_COLUMNS.iter().map(|s| s.to_string()).collect();
        cols.extend(fields.into_iter().filter(|f| !TUPLE_COLUMNS.contains(&f.as_str())));
        cols
    }
}

pub const TASK_COLUMNS: [&str; 12] = [
    "task_id",
    "activity_id",
    "workflow_id",
    "worker_id",
    "core_slot",
    "command_line",
    "workspace",
    "failure_trials",
    "std_out",
    "start_time",
    "end_time",
    "status",
];
pub const TUPLE_COLUMNS: [&str; 6] = [
    "tuple_id",
    "activity_id",
    "produced_by_task",
    "raw_file_path",
    "size_bytes",
    "derived_from",
];
pub const LINK_COLUMNS: [&str; 4] = ["link_id", "kind", "task_id", "tuple_id"];

/// Relations a plan can scan. The last three are views over the metadata table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    WorkQueue,
    DomainTuples,
    ProvLinks,
    /// `worker_id, hostname`
    Workers,
    /// `activity_id, name, operator, workflow_id, mean_duration_ms`
    Activities,
    /// `workflow_id, started_at, completed_at`
    Workflows,
}

impl FromStr for Source {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "work_queue" | "wq" | "tasks" => Source::WorkQueue,
            "domain_tuples" | "tuples" => Source::DomainTuples,
            "prov_links" | "links" => Source::ProvLinks,
            "workers" => Source::Workers,
            "activities" => Source::Activities,
            "workflows" => Source::Workflows,
            _ => return Err(StoreError::UnknownTable(s.to_string())),
        })
    }
}

/// Scalar expressions for derived columns. Arithmetic on a null yields null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    Col(String),
    Lit(Scalar),
    /// The evaluation's `now`.
    Now,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// 1 when left > right, 0 otherwise, null if either side is null.
    Gt(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn col(name: &str) -> Expr {
        Expr::Col(name.to_string())
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::Sub(Box::new(a), Box::new(b))
    }

    pub fn gt(a: Expr, b: Expr) -> Expr {
        Expr::Gt(Box::new(a), Box::new(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFunc {
    /// Number of rows.
    CountAll,
    /// Number of non-null values.
    Count,
    Sum,
    Avg,
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub func: AggFunc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub alias: String,
}

impl Aggregate {
    pub fn new(func: AggFunc, column: Option<&str>, alias: &str) -> Self {
        Aggregate {
            func,
            column: column.map(str::to_string),
            alias: alias.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SortKey {
    pub column: String,
    #[serde(default)]
    pub desc: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinKind {
    #[default]
    Inner,
    Left,
}

/// A relational expression. Serializes as `{"op": ..., ...}`, which is the
/// JSON form accepted by the HTTP API and `query -q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Plan {
    /// Rows of `source` matching `filter`; columns are prefixed `alias.` when
    /// an alias is given. The filter sees unprefixed names.
    Scan {
        source: Source,
        #[serde(default)]
        filter: Predicate,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        alias: Option<String>,
    },
    Select {
        input: Box<Plan>,
        predicate: Predicate,
    },
    /// Keeps the listed columns, in order; `"col AS name"` renames.
    Project {
        input: Box<Plan>,
        columns: Vec<String>,
    },
    Derive {
        input: Box<Plan>,
        name: String,
        expr: Expr,
    },
    /// Equi-join on `(left column, right column)` pairs; no pairs is a cross product.
    Join {
        left: Box<Plan>,
        right: Box<Plan>,
        #[serde(default)]
        on: Vec<(String, String)>,
        #[serde(default)]
        kind: JoinKind,
    },
    /// Groups by `group_by` (output sorted by key). With no grouping columns
    /// the result is exactly one row, even over no input.
    Aggregate {
        input: Box<Plan>,
        #[serde(default)]
        group_by: Vec<String>,
        aggregates: Vec<Aggregate>,
    },
    /// Rows whose `column` equals the column's maximum.
    TopTies {
        input: Box<Plan>,
        column: String,
    },
    /// For each row, every ancestor tuple of the tuple in `tuple_column` that
    /// belongs to `activity_id`, appended with columns prefixed `alias.`.
    Lineage {
        input: Box<Plan>,
        tuple_column: String,
        activity_id: String,
        alias: String,
    },
    OrderBy {
        input: Box<Plan>,
        keys: Vec<SortKey>,
    },
    Limit {
        input: Box<Plan>,
        n: usize,
    },
}

impl Plan {
    pub fn scan(source: Source, filter: Predicate) -> Plan {
        Plan::Scan {
            source,
            filter,
            alias: None,
        }
    }

    pub fn scan_as(source: Source, filter: Predicate, alias: &str) -> Plan {
        Plan::Scan {
            source,
            filter,
            alias: Some(alias.to_string()),
        }
    }

    pub fn select(self, predicate: Predicate) -> Plan {
        Plan::Select {
            input: Box::new(self),
            predicate,
        }
    }

    pub fn project(self, columns: &[&str]) -> Plan {
        Plan::Project {
            input: Box::new(self),
            columns: columns.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn derive(self, name: &str, expr: Expr) -> Plan {
        Plan::Derive {
            input: Box::new(self),
            name: name.to_string(),
            expr,
        }
    }

    pub fn join(self, right: Plan, on: &[(&str, &str)]) -> Plan {
        self.join_kind(right, on, JoinKind::Inner)
    }

    pub fn left_join(self, right: Plan, on: &[(&str, &str)]) -> Plan {
        self.join_kind(right, on, JoinKind::Left)
    }

    fn join_kind(self, right: Plan, on: &[(&str, &str)], kind: JoinKind) -> Plan {
        Plan::Join {
            left: Box::new(self),
            right: Box::new(right),
            on: on.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            kind,
        }
    }

    pub fn aggregate(self, group_by: &[&str], aggregates: Vec<Aggregate>) -> Plan {
        Plan::Aggregate {
            input: Box::new(self),
            group_by: group_by.iter().map(|c| c.to_string()).collect(),
            aggregates,
        }
    }

    pub fn top_ties(self, column: &str) -> Plan {
        Plan::TopTies {
            input: Box::new(self),
            column: column.to_string(),
        }
    }

    pub fn lineage(self, tuple_column: &str, activity_id: &str, alias: &str) -> Plan {
        Plan::Lineage {
            input: Box::new(self),
            tuple_column: tuple_column.to_string(),
            activity_id: activity_id.to_string(),
            alias: alias.to_string(),
        }
    }

    /// Keys as `"col"` (ascending) or `"-col"` (descending).
    pub fn order_by(self, keys: &[&str]) -> Plan {
        Plan::OrderBy {
            input: Box::new(self),
            keys: keys
                .iter()
                .map(|k| match k.strip_prefix('-') {
                    Some(c) => SortKey {
                        column: c.to_string(),
                        desc: true,
                    },
                    None => SortKey {
                        column: k.to_string(),
                        desc: false,
                    },
                })
                .collect(),
        }
    }

    pub fn limit(self, n: usize) -> Plan {
        Plan::Limit {
            input: Box::new(self),
            n,
        }
    }
}

/// An in-memory relation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Scalar>>,
}

impl Relation {
    fn new(columns: Vec<String>) -> Self {
        Relation {
            columns,
            rows: Vec::new(),
        }
    }

    /// Index of `name`: an exact match, else the unique column ending in `.name`.
    pub fn index_of(&self, name: &str) -> StoreResult<usize> {
        column_index(&self.columns, name)
    }
}

fn column_index(columns: &[String], name: &str) -> StoreResult<usize> {
    if let Some(i) = columns.iter().position(|c| c == name) {
        return Ok(i);
    }
    let suffix = format!(".{name}");
    let hits: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.ends_with(&suffix))
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [i] => Ok(*i),
        [] => Err(StoreError::UnknownField(name.to_string())),
        _ => Err(StoreError::Invalid(format!("ambiguous column {name}"))),
    }
}

struct RelRow<'a> {
    columns: &'a [String],
    values: &'a [Scalar],
}

impl Row for RelRow<'_> {
    fn field(&self, name: &str) -> Option<ScalarRef<'_>> {
        column_index(self.columns, name).ok().map(|i| self.values[i].as_ref())
    }
}

/// Result of a query, with the snapshot time it was evaluated at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Scalar>>,
    pub evaluated_at: Millis,
    pub elapsed_ms: f64,
}

impl QueryResult {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Value of `column` in row `row`.
    pub fn get(&self, row: usize, column: &str) -> Option<&Scalar> {
        let i = column_index(&self.columns, column).ok()?;
        self.rows.get(row).map(|r| &r[i])
    }

    /// Columns and rows only, for comparing results across evaluations.
    pub fn relation(&self) -> Relation {
        Relation {
            columns: self.columns.clone(),
            rows: self.rows.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| csv_cell(&v.to_string())).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_cell(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl fmt::Display for QueryResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|v| v.to_string()).collect())
            .collect();
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for r in &cells {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |f: &mut fmt::Formatter<'_>, vals: &[String]| -> fmt::Result {
            let padded: Vec<String> = vals.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            writeln!(f, "{}", padded.join(" | ").trim_end())
        };
        line(f, &self.columns)?;
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        writeln!(f, "{}", rule.join("-+-"))?;
        for r in &cells {
            line(f, r)?;
        }
        write!(f, "({} row{})", self.rows.len(), if self.rows.len() == 1 { "" } else { "s" })
    }
}

// ---- evaluation -----------------------------------------------------------------

fn task_values(t: &Task) -> Vec<Scalar> {
    let opt = |v: Option<u64>| v.map(|v| Scalar::Int(v as i64)).unwrap_or(Scalar::Null);
    vec![
        Scalar::Int(t.task_id as i64),
        Scalar::Str(t.activity_id.clone()),
        Scalar::Str(t.workflow_id.clone()),
        Scalar::Int(t.worker_id as i64),
        Scalar::Int(t.core_slot as i64),
        Scalar::Str(t.command_line.clone()),
        Scalar::Str(t.workspace.clone()),
        Scalar::Int(t.failure_trials as i64),
        Scalar::Str(t.std_out.clone()),
        opt(t.start_time),
        opt(t.end_time),
        Scalar::Str(t.status.as_str().to_string()),
    ]
}

fn tuple_values(t: &DomainTuple, columns: &[String]) -> Vec<Scalar> {
    columns
        .iter()
        .map(|c| t.field(c).map(|v| v.to_owned()).unwrap_or(Scalar::Null))
        .collect()
}

fn link_values(l: &ProvLink) -> Vec<Scalar> {
    vec![
        Scalar::Int(l.link_id as i64),
        Scalar::Str(l.kind.as_str().to_string()),
        Scalar::Int(l.task_id as i64),
        Scalar::Int(l.tuple_id as i64),
    ]
}

fn prefixed(columns: Vec<String>, alias: &Option<String>) -> Vec<String> {
    match alias {
        Some(a) => columns.into_iter().map(|c| format!("{a}.{c}")).collect(),
        None => columns,
    }
}

fn owned(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

fn scan(snap: &Snapshot, source: Source, filter: &Predicate, alias: &Option<String>) -> StoreResult<Relation> {
    let mut rel = match source {
        Source::WorkQueue => Relation {
            columns: owned(&TASK_COLUMNS),
            rows: snap
                .tasks
                .iter()
                .filter(|t| filter.matches(*t))
                .map(task_values)
                .collect(),
        },
        Source::DomainTuples => {
            let columns = snap.tuple_columns();
            let rows = snap
                .tuples
                .iter()
                .filter(|t| filter.matches(*t))
                .map(|t| tuple_values(t, &columns))
                .collect();
            Relation { columns, rows }
        }
        Source::ProvLinks => Relation {
            columns: owned(&LINK_COLUMNS),
            rows: snap
                .links
                .iter()
                .filter(|l| filter.matches(*l))
                .map(link_values)
                .collect(),
        },
        Source::Workers | Source::Activities | Source::Workflows => {
            let mut rel = meta_relation(snap, source);
            let cols = rel.columns.clone();
            rel.rows.retain(|r| {
                filter.matches(&RelRow {
                    columns: &cols,
                    values: r,
                })
            });
            rel
        }
    };
    rel.columns = prefixed(rel.columns, alias);
    Ok(rel)
}

fn meta_relation(snap: &Snapshot, source: Source) -> Relation {
    let opt = |v: Option<u64>| v.map(|v| Scalar::Int(v as i64)).unwrap_or(Scalar::Null);
    match source {
        Source::Workers => {
            let mut rel = Relation::new(owned(&["worker_id", "hostname"]));
            for w in 1..=snap.worker_count() {
                rel.rows.push(vec![Scalar::Int(w as i64), Scalar::Str(snap.hostname_of(w))]);
            }
            rel
        }
        Source::Activities => {
            let mut rel = Relation::new(owned(&["activity_id", "name", "operator", "workflow_id", "mean_duration_ms"]));
            if let Some(wf) = &snap.meta.workflow {
                for a in &wf.activities {
                    rel.rows.push(vec![
                        Scalar::Str(a.activity_id.clone()),
                        Scalar::Str(a.name.clone()),
                        Scalar::Str(a.operator.to_string()),
                        Scalar::Str(wf.workflow_id.clone()),
                        Scalar::Int(a.mean_duration_ms as i64),
                    ]);
                }
            }
            rel
        }
        _ => {
            let mut rel = Relation::new(owned(&["workflow_id", "started_at", "completed_at"]));
            if let Some(wf) = &snap.meta.workflow {
                rel.rows.push(vec![
                    Scalar::Str(wf.workflow_id.clone()),
                    opt(snap.meta.started_at),
                    opt(snap.meta.completed_at),
                ]);
            }
            rel
        }
    }
}

fn check_fields(rel: &Relation, pred: &Predicate) -> StoreResult<()> {
    for f in pred.fields() {
        rel.index_of(f)?;
    }
    Ok(())
}

fn eval_expr(expr: &Expr, cols: &[String], row: &[Scalar], now: Millis) -> StoreResult<Scalar> {
    let bin = |a: &Expr, b: &Expr| -> StoreResult<(Scalar, Scalar)> {
        Ok((eval_expr(a, cols, row, now)?, eval_expr(b, cols, row, now)?))
    };
    Ok(match expr {
        Expr::Col(c) => row[column_index(cols, c)?].clone(),
        Expr::Lit(v) => v.clone(),
        Expr::Now => Scalar::Int(now as i64),
        Expr::Add(a, b) | Expr::Sub(a, b) => {
            let sign = if matches!(expr, Expr::Add(..)) { 1 } else { -1 };
            match bin(a, b)? {
                (Scalar::Int(x), Scalar::Int(y)) => Scalar::Int(x + sign * y),
                (x, y) => match (x.as_f64(), y.as_f64()) {
                    (Some(x), Some(y)) => Scalar::Num(x + sign as f64 * y),
                    _ => Scalar::Null,
                },
            }
        }
        Expr::Div(a, b) => {
            let (x, y) = bin(a, b)?;
            match (x.as_f64(), y.as_f64()) {
                (Some(x), Some(y)) if y != 0.0 => Scalar::Num(x / y),
                _ => Scalar::Null,
            }
        }
        Expr::Gt(a, b) => {
            let (x, y) = bin(a, b)?;
            match x.as_ref().compare(&y.as_ref()) {
                _ if x.is_null() || y.is_null() => Scalar::Null,
                Some(std::cmp::Ordering::Greater) => Scalar::Int(1),
                Some(_) => Scalar::Int(0),
                None => Scalar::Null,
            }
        }
    })
}

fn aggregate(func: AggFunc, values: &[&Scalar], rows: usize) -> Scalar {
    let present: Vec<&Scalar> = values.iter().copied().filter(|v| !v.is_null()).collect();
    match func {
        AggFunc::CountAll => Scalar::Int(rows as i64),
        AggFunc::Count => Scalar::Int(present.len() as i64),
        AggFunc::Sum => {
            if present.is_empty() {
                Scalar::Null
            } else if present.iter().all(|v| matches!(v, Scalar::Int(_))) {
                Scalar::Int(present.iter().map(|v| if let Scalar::Int(i) = v { *i } else { 0 }).sum())
            } else {
                Scalar::Num(present.iter().filter_map(|v| v.as_f64()).sum())
            }
        }
        AggFunc::Avg => {
            let nums: Vec<f64> = present.iter().filter_map(|v| v.as_f64()).collect();
            if nums.is_empty() {
                Scalar::Null
            } else {
                Scalar::Num(nums.iter().sum::<f64>() / nums.len() as f64)
            }
        }
        AggFunc::Max => present.iter().max().map(|v| (*v).clone()).unwrap_or(Scalar::Null),
        AggFunc::Min => present.iter().min().map(|v| (*v).clone()).unwrap_or(Scalar::Null),
    }
}

struct ProvIndex<'a> {
    tuples: HashMap<TupleId, &'a DomainTuple>,
    used: HashMap<TaskId, Vec<TupleId>>,
}

impl<'a> ProvIndex<'a> {
    fn new(snap: &'a Snapshot) -> Self {
        let mut used: HashMap<TaskId, Vec<TupleId>> = HashMap::new();
        for l in &snap.links {
            if l.kind == ProvKind::Used {
                used.entry(l.task_id).or_default().push(l.tuple_id);
            }
        }
        ProvIndex {
            tuples: snap.tuples.iter().map(|t| (t.tuple_id, t)).collect(),
            used,
        }
    }

    /// Tuples one derivation step above `id`.
    fn parents(&self, id: TupleId) -> Vec<TupleId> {
        let Some(t) = self.tuples.get(&id) else { return Vec::new() };
        let mut out: Vec<TupleId> = t.derived_from.into_iter().collect();
        if let Some(task) = t.produced_by_task {
            out.extend(self.used.get(&task).into_iter().flatten().copied());
        }
        out
    }

    /// All ancestors of `id` in breadth-first order, excluding `id` itself.
    fn ancestors(&self, id: TupleId) -> Vec<TupleId> {
        let mut seen = BTreeSet::from([id]);
        let mut queue = VecDeque::from([id]);
        let mut out = Vec::new();
        while let Some(cur) = queue.pop_front() {
            for p in self.parents(cur) {
                if seen.insert(p) {
                    out.push(p);
                    queue.push_back(p);
                }
            }
        }
        out
    }
}

/// Evaluates `plan` against `snap`.
pub fn eval(plan: &Plan, snap: &Snapshot) -> StoreResult<Relation> {
    match plan {
        Plan::Scan { source, filter, alias } => scan(snap, *source, filter, alias),
        Plan::Select { input, predicate } => {
            let mut rel = eval(input, snap)?;
            check_fields(&rel, predicate)?;
            let cols = rel.columns.clone();
            rel.rows.retain(|r| {
                predicate.matches(&RelRow {
                    columns: &cols,
                    values: r,
                })
            });
            Ok(rel)
        }
        Plan::Project { input, columns } => {
            let rel = eval(input, snap)?;
            let mut picks = Vec::with_capacity(columns.len());
            let mut names = Vec::with_capacity(columns.len());
            for c in columns {
                let (src, name) = split_alias(c);
                picks.push(rel.index_of(src)?);
                names.push(name.to_string());
            }
            Ok(Relation {
                columns: names,
                rows: rel
                    .rows
                    .into_iter()
                    .map(|r| picks.iter().map(|&i| r[i].clone()).collect())
                    .collect(),
            })
        }
        Plan::Derive { input, name, expr } => {
            let mut rel = eval(input, snap)?;
            let mut rows = Vec::with_capacity(rel.rows.len());
            for mut r in std::mem::take(&mut rel.rows) {
                let v = eval_expr(expr, &rel.columns, &r, snap.now)?;
                r.push(v);
                rows.push(r);
            }
            if rows.is_empty() {
                // Still validate column references.
                let blank = vec![Scalar::Null; rel.columns.len()];
                eval_expr(expr, &rel.columns, &blank, snap.now)?;
            }
            rel.columns.push(name.clone());
            rel.rows = rows;
            Ok(rel)
        }
        Plan::Join { left, right, on, kind } => {
            let l = eval(left, snap)?;
            let r = eval(right, snap)?;
            let mut columns = l.columns.clone();
            for c in &r.columns {
                if columns.contains(c) {
                    return Err(StoreError::Invalid(format!("duplicate column {c} in join; use an alias")));
                }
                columns.push(c.clone());
            }
            let lk: Vec<usize> = on.iter().map(|(a, _)| l.index_of(a)).collect::<StoreResult<_>>()?;
            let rk: Vec<usize> = on.iter().map(|(_, b)| r.index_of(b)).collect::<StoreResult<_>>()?;
            let mut index: BTreeMap<Vec<Scalar>, Vec<usize>> = BTreeMap::new();
            for (i, row) in r.rows.iter().enumerate() {
                let key: Vec<Scalar> = rk.iter().map(|&k| row[k].clone()).collect();
                if key.iter().any(Scalar::is_null) {
                    continue;
                }
                index.entry(key).or_default().push(i);
            }
            let mut out = Relation::new(columns);
            for row in &l.rows {
                let key: Vec<Scalar> = lk.iter().map(|&k| row[k].clone()).collect();
                let hits = if key.iter().any(Scalar::is_null) {
                    None
                } else {
                    index.get(&key)
                };
                match hits {
                    Some(hits) => {
                        for &i in hits {
                            let mut joined = row.clone();
                            joined.extend(r.rows[i].iter().cloned());
                            out.rows.push(joined);
                        }
                    }
                    None if *kind == JoinKind::Left => {
                        let mut joined = row.clone();
                        joined.extend(std::iter::repeat(Scalar::Null).take(r.columns.len()));
                        out.rows.push(joined);
                    }
                    None => {}
                }
            }
            Ok(out)
        }
        Plan::Aggregate {
            input,
            group_by,
            aggregates,
        } => {
            let rel = eval(input, snap)?;
            let keys: Vec<usize> = group_by.iter().map(|g| rel.index_of(g)).collect::<StoreResult<_>>()?;
            let cols: Vec<Option<usize>> = aggregates
                .iter()
                .map(|a| match (&a.column, a.func) {
                    (_, AggFunc::CountAll) => Ok(None),
                    (Some(c), _) => rel.index_of(c).map(Some),
                    (None, f) => Err(StoreError::Invalid(format!("{f:?} needs a column"))),
                })
                .collect::<StoreResult<_>>()?;
            let mut groups: BTreeMap<Vec<Scalar>, Vec<&Vec<Scalar>>> = BTreeMap::new();
            for row in &rel.rows {
                groups
                    .entry(keys.iter().map(|&k| row[k].clone()).collect())
                    .or_default()
                    .push(row);
            }
            if keys.is_empty() && groups.is_empty() {
                groups.insert(Vec::new(), Vec::new());
            }
            let mut columns = group_by.clone();
            columns.extend(aggregates.iter().map(|a| a.alias.clone()));
            let mut out = Relation::new(columns);
            for (key, rows) in groups {
                let mut r = key;
                for (a, col) in aggregates.iter().zip(&cols) {
                    let values: Vec<&Scalar> = match col {
                        Some(i) => rows.iter().map(|row| &row[*i]).collect(),
                        None => Vec::new(),
                    };
                    r.push(aggregate(a.func, &values, rows.len()));
                }
                out.rows.push(r);
            }
            Ok(out)
        }
        Plan::TopTies { input, column } => {
            let mut rel = eval(input, snap)?;
            let i = rel.index_of(column)?;
            let max = rel.rows.iter().map(|r| &r[i]).filter(|v| !v.is_null()).max().cloned();
            match max {
                Some(m) => rel.rows.retain(|r| r[i] == m),
                None => rel.rows.clear(),
            }
            Ok(rel)
        }
        Plan::Lineage {
            input,
            tuple_column,
            activity_id,
            alias,
        } => {
            let rel = eval(input, snap)?;
            let i = rel.index_of(tuple_column)?;
            let tuple_cols = snap.tuple_columns();
            let prov = ProvIndex::new(snap);
            let mut columns = rel.columns.clone();
            columns.extend(tuple_cols.iter().map(|c| format!("{alias}.{c}")));
            let mut out = Relation::new(columns);
            for row in &rel.rows {
                let Some(id) = row[i].as_f64().map(|v| v as TupleId) else { continue };
                let mut hits: Vec<&DomainTuple> = prov
                    .ancestors(id)
                    .into_iter()
                    .filter_map(|a| prov.tuples.get(&a).copied())
                    .filter(|t| &t.activity_id == activity_id)
                    .collect();
                hits.sort_by_key(|t| t.tuple_id);
                for t in hits {
                    let mut joined = row.clone();
                    joined.extend(tuple_values(t, &tuple_cols));
                    out.rows.push(joined);
                }
            }
            Ok(out)
        }
        Plan::OrderBy { input, keys } => {
            let mut rel = eval(input, snap)?;
            let idx: Vec<(usize, bool)> = keys
                .iter()
                .map(|k| rel.index_of(&k.column).map(|i| (i, k.desc)))
                .collect::<StoreResult<_>>()?;
            rel.rows.sort_by(|a, b| {
                for &(i, desc) in &idx {
                    let o = a[i].cmp(&b[i]);
                    let o = if desc { o.reverse() } else { o };
                    if o.is_ne() {
                        return o;
                    }
                }
                std::cmp::Ordering::Equal
            });
            Ok(rel)
        }
        Plan::Limit { input, n } => {
            let mut rel = eval(input, snap)?;
            rel.rows.truncate(*n);
            Ok(rel)
        }
    }
}

fn split_alias(item: &str) -> (&str, &str) {
    let lower = item.to_ascii_lowercase();
    match lower.find(" as ") {
        Some(p) => (item[..p].trim(), item[p + 4..].trim()),
        None => (item.trim(), item.trim()),
    }
}

/// Evaluates `plan` and stamps the result.
pub fn run_plan(plan: &Plan, snap: &Snapshot) -> StoreResult<QueryResult> {
    let start = Instant::now();
    let rel = eval(plan, snap)?;
    Ok(QueryResult {
        columns: rel.columns,
        rows: rel.rows,
        evaluated_at: snap.now,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

// ---- predefined queries ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueryId {
    Q1,
    Q2,
    Q3,
    Q4,
    Q5,
    Q6,
    Q7,
}

impl QueryId {
    pub const ALL: [QueryId; 7] = [
        QueryId::Q1,
        QueryId::Q2,
        QueryId::Q3,
        QueryId::Q4,
        QueryId::Q5,
        QueryId::Q6,
        QueryId::Q7,
    ];

    pub fn description(&self) -> &'static str {
        match self {
            QueryId::Q1 => "per node and status: tasks started in the last minute, how many finished, total failure trials",
            QueryId::Q2 => "for one hostname: tasks finished in the last minute with the bytes of the files they consumed",
            QueryId::Q3 => "hostnames with the most tasks aborted or finished after failures in the last minute",
            QueryId::Q4 => "tasks left to execute in a workflow",
            QueryId::Q5 => "in workflows running over a minute: activities with the most unfinished tasks",
            QueryId::Q6 => "average and maximum duration of finished tasks, per activity still in progress",
            QueryId::Q7 => "Pre-Processing outputs behind wear values over a threshold, when wear tasks run slower than average",
        }
    }
}

impl fmt::Display for QueryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for QueryId {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        QueryId::ALL
            .into_iter()
            .find(|q| q.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| StoreError::Invalid(format!("unknown query {s:?}; expected Q1..Q7")))
    }
}

pub type Params = BTreeMap<String, String>;

fn param<'a>(params: &'a Params, names: &[&str]) -> Option<&'a str> {
    names.iter().find_map(|n| params.get(*n).map(String::as_str))
}

fn required<'a>(params: &'a Params, q: QueryId, names: &[&str]) -> StoreResult<&'a str> {
    param(params, names).ok_or_else(|| StoreError::Invalid(format!("{q} needs parameter {}", names[0])))
}

fn int(v: i64) -> Scalar {
    Scalar::Int(v)
}

fn within_last_minute(field: &str, now: Millis) -> Predicate {
    Predicate::cmp(field, CmpOp::Ge, int(now as i64 - WINDOW_MS as i64)).and(Predicate::cmp(field, CmpOp::Le, int(now as i64)))
}

fn statuses(list: &[TaskStatus]) -> Predicate {
    Predicate::is_in("status", list.iter().map(|s| Scalar::from(s.as_str())).collect())
}

fn active() -> Predicate {
    statuses(&[TaskStatus::Ready, TaskStatus::Running])
}

fn finished_durations(filter: Predicate) -> Plan {
    Plan::scan(Source::WorkQueue, Predicate::eq("status", TaskStatus::Finished.as_str()).and(filter))
        .derive("duration_ms", Expr::sub(Expr::col("end_time"), Expr::col("start_time")))
}

fn workers() -> Plan {
    Plan::scan_as(Source::Workers, Predicate::True, "w")
}

/// Builds the plan for `q`. Name-based lookups (Q7) resolve against `snap`.
pub fn compile(q: QueryId, params: &Params, snap: &Snapshot) -> StoreResult<Plan> {
    let now = snap.now;
    Ok(match q {
        QueryId::Q1 => Plan::scan(Source::WorkQueue, within_last_minute("start_time", now))
            .join(workers(), &[("worker_id", "w.worker_id")])
            .aggregate(
                &["w.hostname", "status"],
                vec![
                    Aggregate::new(AggFunc::CountAll, None, "started"),
                    Aggregate::new(AggFunc::Count, Some("end_time"), "finished"),
                    Aggregate::new(AggFunc::Sum, Some("failure_trials"), "failure_trials"),
                ],
            )
            .project(&["w.hostname AS hostname", "status", "started", "finished", "failure_trials"])
            .order_by(&["hostname", "status"]),
        QueryId::Q2 => {
            let host = required(params, q, &["hostname", "host", "node"])?;
            Plan::scan(Source::WorkQueue, within_last_minute("end_time", now))
                .join(
                    Plan::scan_as(Source::Workers, Predicate::eq("hostname", host), "w"),
                    &[("worker_id", "w.worker_id")],
                )
                .left_join(
                    Plan::scan_as(Source::ProvLinks, Predicate::eq("kind", ProvKind::Used.as_str()), "u"),
                    &[("task_id", "u.task_id")],
                )
                .left_join(
                    Plan::scan_as(Source::DomainTuples, Predicate::True, "d"),
                    &[("u.tuple_id", "d.tuple_id")],
                )
                .aggregate(
                    &["task_id", "status"],
                    vec![Aggregate::new(AggFunc::Sum, Some("d.size_bytes"), "bytes")],
                )
                .order_by(&["-bytes", "status", "task_id"])
        }
        QueryId::Q3 => {
            let failed = Predicate::Or {
                terms: vec![
                    Predicate::eq("status", TaskStatus::Aborted.as_str()),
                    Predicate::eq("status", TaskStatus::Finished.as_str())
                        .and(Predicate::cmp("failure_trials", CmpOp::Gt, int(0))),
                ],
            };
            Plan::scan(Source::WorkQueue, failed.and(within_last_minute("end_time", now)))
                .join(workers(), &[("worker_id", "w.worker_id")])
                .aggregate(&["w.hostname"], vec![Aggregate::new(AggFunc::CountAll, None, "failed_tasks")])
                .top_ties("failed_tasks")
                .project(&["w.hostname AS hostname", "failed_tasks"])
                .order_by(&["hostname"])
        }
        QueryId::Q4 => {
            let wf = required(params, q, &["workflow", "workflow_id"])?;
            Plan::scan(Source::Workflows, Predicate::eq("workflow_id", wf))
                .left_join(Plan::scan_as(Source::WorkQueue, active(), "t"), &[("workflow_id", "t.workflow_id")])
                .aggregate(&["workflow_id"], vec![Aggregate::new(AggFunc::Count, Some("t.task_id"), "tasks_left")])
                .project(&["tasks_left"])
        }
        QueryId::Q5 => {
            let running = Predicate::cmp("started_at", CmpOp::Lt, int(now as i64 - WINDOW_MS as i64))
                .and(Predicate::eq("completed_at", Scalar::Null));
            Plan::scan(Source::Workflows, running)
                .join(Plan::scan_as(Source::WorkQueue, active(), "t"), &[("workflow_id", "t.workflow_id")])
                .join(
                    Plan::scan_as(Source::Activities, Predicate::True, "a"),
                    &[("t.activity_id", "a.activity_id")],
                )
                .aggregate(&["a.name"], vec![Aggregate::new(AggFunc::CountAll, None, "unfinished_tasks")])
                .top_ties("unfinished_tasks")
                .project(&["a.name AS activity", "unfinished_tasks"])
                .order_by(&["activity"])
        }
        QueryId::Q6 => {
            let in_progress = Plan::scan_as(Source::WorkQueue, active(), "x")
                .aggregate(&["x.activity_id"], vec![Aggregate::new(AggFunc::CountAll, None, "x.active")]);
            finished_durations(Predicate::True)
                .join(in_progress, &[("activity_id", "x.activity_id")])
                .join(
                    Plan::scan_as(Source::Activities, Predicate::True, "a"),
                    &[("activity_id", "a.activity_id")],
                )
                .aggregate(
                    &["activity_id", "a.name"],
                    vec![
                        Aggregate::new(AggFunc::Avg, Some("duration_ms"), "avg_ms"),
                        Aggregate::new(AggFunc::Max, Some("duration_ms"), "max_ms"),
                    ],
                )
                .order_by(&["-avg_ms", "-max_ms", "activity_id"])
                .project(&["activity_id", "a.name AS activity", "avg_ms", "max_ms"])
        }
        QueryId::Q7 => {
            let threshold = match param(params, &["threshold", "fl"]) {
                Some(t) => t
                    .parse::<f64>()
                    .map_err(|_| StoreError::Invalid(format!("Q7 threshold {t:?} is not a number")))?,
                None => 0.5,
            };
            let wear_name = param(params, &["wear_activity"]).unwrap_or(WEAR_AND_TEAR);
            let pre_name = param(params, &["pre_activity"]).unwrap_or(PRE_PROCESSING);
            let (Some(wear), Some(pre)) = (snap.activity_named(wear_name), snap.activity_named(pre_name)) else {
                // Nothing to relate: an empty relation with the usual columns.
                return Ok(Plan::scan(Source::WorkQueue, Predicate::Not {
                    term: Box::new(Predicate::True),
                })
                .derive("cx", Expr::Lit(Scalar::Null))
                .derive("cy", Expr::Lit(Scalar::Null))
                .derive("cz", Expr::Lit(Scalar::Null))
                .derive("raw_file_path", Expr::Lit(Scalar::Null))
                .derive("fl", Expr::Lit(Scalar::Null))
                .project(&["cx", "cy", "cz", "raw_file_path", "fl"]));
            };
            let slow = finished_durations(Predicate::eq("activity_id", wear.as_str()))
                .aggregate(&[], vec![Aggregate::new(AggFunc::Avg, Some("duration_ms"), "wear_avg_ms")])
                .join(
                    finished_durations(Predicate::True)
                        .aggregate(&[], vec![Aggregate::new(AggFunc::Avg, Some("duration_ms"), "all_avg_ms")]),
                    &[],
                )
                .derive("slow", Expr::gt(Expr::col("wear_avg_ms"), Expr::col("all_avg_ms")))
                .select(Predicate::eq("slow", int(1)));
            let high = Predicate::eq("activity_id", wear.as_str())
                .and(Predicate::cmp("fl", CmpOp::Gt, Scalar::Num(threshold)))
                .and(Predicate::eq("derived_from", Scalar::Null));
            Plan::scan_as(Source::DomainTuples, high, "f")
                .lineage("f.tuple_id", &pre, "p")
                .join(slow, &[])
                .order_by(&["p.tuple_id", "f.tuple_id"])
                .project(&[
                    "p.cx AS cx",
                    "p.cy AS cy",
                    "p.cz AS cz",
                    "p.raw_file_path AS raw_file_path",
                    "f.fl AS fl",
                ])
        }
    })
}

/// Runs a predefined query over `snap`.
pub fn run_predefined_on(q: QueryId, params: &Params, snap: &Snapshot) -> StoreResult<QueryResult> {
    let start = Instant::now();
    let plan = compile(q, params, snap)?;
    let mut res = run_plan(&plan, snap)?;
    res.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(res)
}

/// Snapshots the store and runs a predefined query. `now` pins the time
/// windows; `None` uses the store clock.
pub fn run_predefined<C: StoreApi + ?Sized>(
    client: &C,
    q: QueryId,
    params: &Params,
    now: Option<Millis>,
) -> StoreResult<QueryResult> {
    let start = Instant::now();
    let snap = Snapshot::load(client, now)?;
    let mut res = run_predefined_on(q, params, &snap)?;
    res.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(res)
}

/// What `query -q` and the HTTP API accept.
#[derive(Debug, Clone, PartialEq)]
pub enum QueryText {
    Predefined(QueryId),
    Plan(Plan),
}

impl QueryText {
    /// `Q1`..`Q7`, a JSON plan, or a `SELECT` statement.
    pub fn parse(text: &str) -> StoreResult<QueryText> {
        let t = text.trim();
        if let Ok(q) = t.parse::<QueryId>() {
            return Ok(QueryText::Predefined(q));
        }
        if t.starts_with('{') {
            return serde_json::from_str(t)
                .map(QueryText::Plan)
                .map_err(|e| StoreError::Invalid(format!("bad plan: {e}")));
        }
        parse_sql(t).map(QueryText::Plan)
    }
}

/// Runs a query text against the store.
pub fn run_text<C: StoreApi + ?Sized>(
    client: &C,
    text: &QueryText,
    params: &Params,
    now: Option<Millis>,
) -> StoreResult<QueryResult> {
    let start = Instant::now();
    let snap = Snapshot::load(client, now)?;
    let mut res = match text {
        QueryText::Predefined(q) => run_predefined_on(*q, params, &snap)?,
        QueryText::Plan(p) => run_plan(p, &snap)?,
    };
    res.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(res)
}

// ---- SQL subset -----------------------------------------------------------------

const CLAUSES: [&str; 5] = ["FROM", "WHERE", "GROUP BY", "ORDER BY", "LIMIT"];

/// Byte offsets of top-level clause keywords, skipping quoted text.
fn clause_positions(sql: &str) -> Vec<(usize, &'static str)> {
    let upper = sql.to_ascii_uppercase();
    let bytes = upper.as_bytes();
    let mut out = Vec::new();
    let mut quote: Option<u8> = None;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if let Some(q) = quote {
            if c == q {
                quote = None;
            }
            i += 1;
            continue;
        }
        if c == b'\'' || c == b'"' {
            quote = Some(c);
            i += 1;
            continue;
        }
        let boundary_before = i == 0 || bytes[i - 1].is_ascii_whitespace();
        if boundary_before {
            if let Some(kw) = CLAUSES.iter().find(|kw| {
                let end = i + kw.len();
                upper[i..].starts_with(*kw) && (end == bytes.len() || bytes[end].is_ascii_whitespace())
            }) {
                out.push((i, *kw));
                i += kw.len();
                continue;
            }
        }
        i += 1;
    }
    out
}

fn parse_agg(item: &str) -> Option<Aggregate> {
    let (expr, alias) = split_alias(item);
    let open = expr.find('(')?;
    if !expr.ends_with(')') {
        return None;
    }
    let name = expr[..open].trim().to_ascii_lowercase();
    let arg = expr[open + 1..expr.len() - 1].trim();
    let func = match (name.as_str(), arg) {
        ("count", "*") => AggFunc::CountAll,
        ("count", _) => AggFunc::Count,
        ("sum", _) => AggFunc::Sum,
        ("avg", _) => AggFunc::Avg,
        ("max", _) => AggFunc::Max,
        ("min", _) => AggFunc::Min,
        _ => return None,
    };
    let column = (func != AggFunc::CountAll).then(|| arg.to_string());
    let alias = if alias == item.trim() {
        format!("{name}_{}", if arg == "*" { "all" } else { arg })
    } else {
        alias.to_string()
    };
    Some(Aggregate { func, column, alias })
}

fn bad(msg: impl Into<String>) -> StoreError {
    StoreError::Invalid(msg.into())
}

/// Parses `SELECT items FROM table [WHERE pred] [GROUP BY cols]
/// [ORDER BY col [ASC|DESC], ...] [LIMIT n]`.
///
/// Items are `*`, column names (optionally `AS name`) or one of
/// `count(*)`, `count(c)`, `sum(c)`, `avg(c)`, `max(c)`, `min(c)`.
pub fn parse_sql(sql: &str) -> StoreResult<Plan> {
    let sql = sql.trim().trim_end_matches(';').trim();
    if sql.len() < 6 || !sql[..6].eq_ignore_ascii_case("select") {
        return Err(bad("expected Q1..Q7, a JSON plan or SELECT ..."));
    }
    let body = &sql[6..];
    let pos = clause_positions(body);
    let section = |kw: &str| -> Option<&str> {
        let idx = pos.iter().position(|(_, k)| *k == kw)?;
        let start = pos[idx].0 + kw.len();
        let end = pos.get(idx + 1).map(|p| p.0).unwrap_or(body.len());
        Some(body[start..end].trim())
    };
    let order: Vec<&str> = pos.iter().map(|(_, k)| *k).collect();
    let mut sorted = order.clone();
    sorted.sort_by_key(|k| CLAUSES.iter().position(|c| c == k));
    sorted.dedup();
    if sorted != order {
        return Err(bad("clauses out of order or repeated"));
    }
    let items_text = match pos.first() {
        Some((p, "FROM")) => body[..*p].trim(),
        _ => return Err(bad("missing FROM")),
    };
    let from = section("FROM").unwrap_or_default();
    let mut from_words = from.split_whitespace();
    let source: Source = from_words.next().ok_or_else(|| bad("missing table"))?.parse()?;
    if from_words.next().is_some() {
        return Err(bad("only a single table is supported in FROM"));
    }
    let mut plan = Plan::scan(source, Predicate::True);
    if let Some(w) = section("WHERE") {
        plan = plan.select(Predicate::parse(w).map_err(bad)?);
    }
    let items: Vec<&str> = items_text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(bad("empty select list"));
    }
    let group: Vec<&str> = section("GROUP BY")
        .map(|g| g.split(',').map(str::trim).filter(|s| !s.is_empty()).collect())
        .unwrap_or_default();
    let aggs: Vec<Option<Aggregate>> = items.iter().map(|i| parse_agg(i)).collect();
    if !group.is_empty() || aggs.iter().any(Option::is_some) {
        let aggregates: Vec<Aggregate> = aggs.iter().flatten().cloned().collect();
        plan = plan.aggregate(&group, aggregates);
        let mut cols = Vec::new();
        for (item, agg) in items.iter().zip(&aggs) {
            match agg {
                Some(a) => cols.push(a.alias.clone()),
                None => {
                    let (src, _) = split_alias(item);
                    if !group.contains(&src) {
                        return Err(bad(format!("{src} must appear in GROUP BY")));
                    }
                    cols.push(item.to_string());
                }
            }
        }
        plan = Plan::Project {
            input: Box::new(plan),
            columns: cols,
        };
    } else if items != ["*"] {
        plan = Plan::Project {
            input: Box::new(plan),
            columns: items.iter().map(|s| s.to_string()).collect(),
        };
    }
    if let Some(o) = section("ORDER BY") {
        let mut keys = Vec::new();
        for part in o.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let mut w = part.split_whitespace();
            let column = w.next().unwrap_or_default().to_string();
            let desc = match w.next().map(|d| d.to_ascii_uppercase()) {
                None => false,
                Some(d) if d == "ASC" => false,
                Some(d) if d == "DESC" => true,
                Some(d) => return Err(bad(format!("unexpected {d} in ORDER BY"))),
            };
            keys.push(SortKey { column, desc });
        }
        plan = Plan::OrderBy {
            input: Box::new(plan),
            keys,
        };
    }
    if let Some(l) = section("LIMIT") {
        let n = l.parse().map_err(|_| bad(format!("bad LIMIT {l:?}")))?;
        plan = plan.limit(n);
    }
    Ok(plan)
}

// ---- provenance -----------------------------------------------------------------

/// One tuple on a derivation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivationStep {
    pub tuple_id: TupleId,
    pub activity_id: String,
    pub produced_by_task: Option<TaskId>,
    /// Set when the tuple is a steering rewrite of another tuple.
    pub derived_from: Option<TupleId>,
    /// Tuples the producing task used.
    pub used: Vec<TupleId>,
    /// Steering actions that touched this tuple.
    pub steered_by: Vec<ActionId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Derivation {
    pub tuple_id: TupleId,
    /// The tuple itself, then its ancestors breadth first.
    pub steps: Vec<DerivationStep>,
    /// Workflow-input tuples the path ends at.
    pub input_tuple_ids: Vec<TupleId>,
}

impl Derivation {
    pub fn reaches_inputs(&self) -> bool {
        !self.input_tuple_ids.is_empty()
    }
}

/// Derivation path from `tuple_id` back to the workflow inputs.
pub fn derivation(snap: &Snapshot, tuple_id: TupleId) -> StoreResult<Derivation> {
    let prov = ProvIndex::new(snap);
    if !prov.tuples.contains_key(&tuple_id) {
        return Err(StoreError::Invalid(format!("unknown tuple {tuple_id}")));
    }
    let mut steered: HashMap<TupleId, Vec<ActionId>> = HashMap::new();
    for l in &snap.links {
        if l.kind == ProvKind::SteeredBy {
            steered.entry(l.tuple_id).or_default().push(l.task_id);
        }
    }
    let mut ids = vec![tuple_id];
    ids.extend(prov.ancestors(tuple_id));
    let mut steps = Vec::new();
    let mut inputs = Vec::new();
    for id in ids {
        let Some(t) = prov.tuples.get(&id) else { continue };
        let used = t
            .produced_by_task
            .and_then(|task| prov.used.get(&task).cloned())
            .unwrap_or_default();
        if t.produced_by_task.is_none() && t.derived_from.is_none() {
            inputs.push(id);
        }
        steps.push(DerivationStep {
            tuple_id: id,
            activity_id: t.activity_id.clone(),
            produced_by_task: t.produced_by_task,
            derived_from: t.derived_from,
            used,
            steered_by: steered.get(&id).cloned().unwrap_or_default(),
        });
    }
    inputs.sort_unstable();
    Ok(Derivation {
        tuple_id,
        steps,
        input_tuple_ids: inputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(cols: &[&str], rows: Vec<Vec<Scalar>>) -> Relation {
        Relation {
            columns: owned(cols),
            rows,
        }
    }

    #[test]
    fn column_lookup_by_suffix() {
        let r = rel(&["w.hostname", "status", "t.status"], vec![]);
        assert_eq!(r.index_of("hostname").unwrap(), 0);
        assert_eq!(r.index_of("status").unwrap(), 1);
        assert!(r.index_of("missing").is_err());
        let amb = rel(&["a.x", "b.x"], vec![]);
        assert!(amb.index_of("x").is_err());
    }

    #[test]
    fn aggregates_follow_sql_null_rules() {
        let ints = [Scalar::Int(2), Scalar::Null, Scalar::Int(5)];
        let refs: Vec<&Scalar> = ints.iter().collect();
        assert_eq!(aggregate(AggFunc::CountAll, &refs, 3), Scalar::Int(3));
        assert_eq!(aggregate(AggFunc::Count, &refs, 3), Scalar::Int(2));
        assert_eq!(aggregate(AggFunc::Sum, &refs, 3), Scalar::Int(7));
        assert_eq!(aggregate(AggFunc::Avg, &refs, 3), Scalar::Num(3.5));
        assert_eq!(aggregate(AggFunc::Max, &refs, 3), Scalar::Int(5));
        assert_eq!(aggregate(AggFunc::Min, &refs, 3), Scalar::Int(2));
        assert_eq!(aggregate(AggFunc::Sum, &[], 0), Scalar::Null);
    }

    #[test]
    fn sql_subset_parses() {
        let p = parse_sql("select * from work_queue where status = 'RUNNING' order by start_time").unwrap();
        let Plan::OrderBy { keys, input } = p else { panic!() };
        assert_eq!(keys[0].column, "start_time");
        assert!(matches!(*input, Plan::Select { .. }));
        let p = parse_sql("SELECT activity_id, count(*) AS n, avg(failure_trials) FROM wq GROUP BY activity_id LIMIT 3")
            .unwrap();
        assert!(matches!(p, Plan::Limit { n: 3, .. }));
        assert!(parse_sql("select x, count(*) from wq").is_err());
        assert!(parse_sql("select * from nowhere").is_err());
        assert!(parse_sql("select * where x=1").is_err());
        assert!(parse_sql("select * from wq where name = 'GROUP BY'").is_ok());
    }

    #[test]
    fn query_ids_parse() {
        assert_eq!("q4".parse::<QueryId>().unwrap(), QueryId::Q4);
        assert!("Q8".parse::<QueryId>().is_err());
        assert!(matches!(QueryText::parse("Q1").unwrap(), QueryText::Predefined(QueryId::Q1)));
        let json = serde_json::to_string(&Plan::scan(Source::WorkQueue, Predicate::True).limit(2)).unwrap();
        assert!(matches!(QueryText::parse(&json).unwrap(), QueryText::Plan(Plan::Limit { .. })));
    }

    #[test]
    fn result_renders_as_table_and_csv() {
        let r = QueryResult {
            columns: owned(&["a", "b"]),
            rows: vec![vec![Scalar::Int(1), Scalar::Str("x,y".into())]],
            evaluated_at: 0,
            elapsed_ms: 0.0,
        };
        assert_eq!(r.to_csv(), "a,b\n1,\"x,y\"\n");
        assert!(r.to_string().ends_with("(1 row)"));
    }
}
