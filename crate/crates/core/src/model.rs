//! Domain types shared by every role: workflow structure, the work-queue row,
//! domain tuples, provenance links, steering actions and cluster topology.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::predicate::Predicate;

pub type TaskId = u64;
pub type TupleId = u64;
pub type LinkId = u64;
pub type ActionId = u64;
/// Milliseconds since the engine epoch.
pub type Millis = u64;

/// A single domain or column value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Null,
    Int(i64),
    Num(f64),
    Str(String),
}

impl Scalar {
    pub fn as_ref(&self) -> ScalarRef<'_> {
        match self {
            Scalar::Null => ScalarRef::Null,
            Scalar::Int(v) => ScalarRef::Int(*v),
            Scalar::Num(v) => ScalarRef::Num(*v),
            Scalar::Str(s) => ScalarRef::Str(s),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        self.as_ref().as_f64()
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Scalar::Null)
    }

    /// Parses a textual value the way `key=value` output and CLI literals are read:
    /// integers first, then floats, otherwise a string.
    pub fn parse_text(text: &str) -> Scalar {
        if let Ok(v) = text.parse::<i64>() {
            return Scalar::Int(v);
        }
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Scalar::Num(v),
            _ => Scalar::Str(text.to_string()),
        }
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        self.as_ref().total_cmp(&other.as_ref()) == Ordering::Equal
    }
}

impl Eq for Scalar {}

impl PartialOrd for Scalar {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scalar {
    fn cmp(&self, other: &Self) -> Ordering {
        self.as_ref().total_cmp(&other.as_ref())
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.as_ref().fmt(f)
    }
}

impl From<f64> for Scalar {
    fn from(v: f64) -> Self {
        Scalar::Num(v)
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_string())
    }
}

impl From<String> for Scalar {
    fn from(v: String) -> Self {
        Scalar::Str(v)
    }
}

/// Borrowed view of a [`Scalar`], so rows can expose columns without allocating.
#[derive(Debug, Clone, Copy)]
pub enum ScalarRef<'a> {
    Null,
    Int(i64),
    Num(f64),
    Str(&'a str),
}

impl<'a> ScalarRef<'a> {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ScalarRef::Int(v) => Some(v as f64),
            ScalarRef::Num(v) => Some(v),
            _ => None,
        }
    }

    pub fn to_owned(&self) -> Scalar {
        match *self {
            ScalarRef::Null => Scalar::Null,
            ScalarRef::Int(v) => Scalar::Int(v),
            ScalarRef::Num(v) => Scalar::Num(v),
            ScalarRef::Str(s) => Scalar::Str(s.to_string()),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            ScalarRef::Null => 0,
            ScalarRef::Int(_) | ScalarRef::Num(_) => 1,
            ScalarRef::Str(_) => 2,
        }
    }

    /// Comparison used by predicates. Numbers compare numerically across
    /// `Int`/`Num`; a string compares against a number by parsing it. Anything
    /// involving `Null` (other than `Null` vs `Null`) is incomparable.
    pub fn compare(&self, other: &ScalarRef<'_>) -> Option<Ordering> {
        match (*self, *other) {
            (ScalarRef::Null, ScalarRef::Null) => Some(Ordering::Equal),
            (ScalarRef::Null, _) | (_, ScalarRef::Null) => None,
            (ScalarRef::Int(a), ScalarRef::Int(b)) => Some(a.cmp(&b)),
            (ScalarRef::Str(a), ScalarRef::Str(b)) => Some(a.cmp(b)),
            (ScalarRef::Str(a), b) => {
                let a = a.trim().parse::<f64>().ok()?;
                a.partial_cmp(&b.as_f64()?)
            }
            (a, ScalarRef::Str(b)) => {
                let b = b.trim().parse::<f64>().ok()?;
                a.as_f64()?.partial_cmp(&b)
            }
            (a, b) => a.as_f64()?.partial_cmp(&b.as_f64()?),
        }
    }

    /// Total order for sorting: nulls, then numbers, then strings.
    pub fn total_cmp(&self, other: &ScalarRef<'_>) -> Ordering {
        match (*self, *other) {
            (ScalarRef::Int(a), ScalarRef::Int(b)) => a.cmp(&b),
            (ScalarRef::Str(a), ScalarRef::Str(b)) => a.cmp(b),
            (a, b) if a.rank() == 1 && b.rank() == 1 => {
                let (x, y) = (a.as_f64().unwrap(), b.as_f64().unwrap());
                x.partial_cmp(&y).unwrap_or_else(|| x.total_cmp(&y))
            }
            (a, b) => a.rank().cmp(&b.rank()),
        }
    }
}

impl fmt::Display for ScalarRef<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarRef::Null => Ok(()),
            ScalarRef::Int(v) => write!(f, "{v}"),
            ScalarRef::Num(v) => write!(f, "{v}"),
            ScalarRef::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskStatus {
    Ready,
    Running,
    Finished,
    Aborted,
}

impl TaskStatus {
    pub const ALL: [TaskStatus; 4] = [
        TaskStatus::Ready,
        TaskStatus::Running,
        TaskStatus::Finished,
        TaskStatus::Aborted,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskStatus::Ready => "READY",
            TaskStatus::Running => "RUNNING",
            TaskStatus::Finished => "FINISHED",
            TaskStatus::Aborted => "ABORTED",
        }
    }

    pub fn parse(s: &str) -> Option<TaskStatus> {
        TaskStatus::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
    }

    /// Transitions taken by scheduling. `READY -> ABORTED` is additionally
    /// allowed for steering prunes and unrenderable tasks, see [`Self::can_prune`].
    pub fn can_transition(self, to: TaskStatus) -> bool {
        use TaskStatus::*;
        matches!(
            (self, to),
            (Ready, Running) | (Running, Finished) | (Running, Ready) | (Running, Aborted)
        )
    }

    pub fn can_prune(self) -> bool {
        self == TaskStatus::Ready
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Finished | TaskStatus::Aborted)
    }

    pub fn is_active(self) -> bool {
        matches!(self, TaskStatus::Ready | TaskStatus::Running)
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Dataflow operators.
///
/// - `Map`: one input tuple, one task, one output tuple; pipelined.
/// - `Filter`: like `Map` but the task emits zero or one tuple.
/// - `Reduce`: all upstream tuples feed a single task once every upstream
///   activity has settled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Operator {
    Map,
    Filter,
    Reduce,
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operator::Map => "MAP",
            Operator::Filter => "FILTER",
            Operator::Reduce => "REDUCE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivitySpec {
    pub activity_id: String,
    pub name: String,
    pub operator: Operator,
    /// Command with `{field}` placeholders, e.g. `/run a={a} b={b} c={c}`.
    pub command_template: String,
    pub input_schema: Vec<String>,
    pub output_schema: Vec<String>,
    #[serde(default)]
    pub mean_duration_ms: u64,
    /// Working directory for the activity's tasks; defaults to `/data/<activity_id>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace: Option<String>,
}

impl ActivitySpec {
    pub fn workspace(&self) -> String {
        self.workspace
            .clone()
            .unwrap_or_else(|| format!("/data/{}", self.activity_id))
    }

    pub fn placeholders(&self) -> Vec<String> {
        placeholders(&self.command_template)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSpec {
    pub workflow_id: String,
    pub activities: Vec<ActivitySpec>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    /// Field names carried by the workflow's input tuples.
    #[serde(default)]
    pub input_schema: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl WorkflowSpec {
    pub fn activity(&self, activity_id: &str) -> Option<&ActivitySpec> {
        self.activities.iter().find(|a| a.activity_id == activity_id)
    }

    pub fn activity_by_name(&self, name: &str) -> Option<&ActivitySpec> {
        self.activities.iter().find(|a| a.name == name)
    }

    pub fn upstream(&self, activity_id: &str) -> Vec<&str> {
        let mut ups: Vec<&str> = self
            .edges
            .iter()
            .filter(|(_, to)| to == activity_id)
            .map(|(from, _)| from.as_str())
            .collect();
        ups.sort_unstable();
        ups.dedup();
        ups
    }

    pub fn is_source(&self, activity_id: &str) -> bool {
        !self.edges.iter().any(|(_, to)| to == activity_id)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_workflow(self)
    }

    pub fn topo_order(&self) -> Result<Vec<String>, String> {
        topo_order(self)
    }
}

/// Extracts `{name}` placeholders from a command template, in order of appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                let name = after[..close].trim();
                if !name.is_empty() {
                    out.push(name.to_string());
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

/// Renders a command template from input tuples. A single tuple substitutes
/// its value directly; several tuples (REDUCE) substitute a comma-joined list.
pub fn render_command<'a, I>(template: &str, tuples: I) -> Result<String, String>
where
    I: IntoIterator<Item = &'a BTreeMap<String, Scalar>> + Clone,
{
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            rest = "";
            break;
        };
        let name = after[..close].trim();
        let mut values = Vec::new();
        for fields in tuples.clone() {
            match fields.get(name) {
                Some(v) => values.push(v.to_string()),
                None => return Err(format!("missing field {name}")),
            }
        }
        if values.is_empty() {
            return Err(format!("no input tuple provides {name}"));
        }
        out.push_str(&values.join(","));
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn validate_workflow(spec: &WorkflowSpec) -> ValidationReport {
    let mut errors = Vec::new();
    if spec.activities.is_empty() {
        errors.push("no activities".to_string());
        return ValidationReport { errors };
    }
    let mut seen = BTreeSet::new();
    for act in &spec.activities {
        if act.activity_id.is_empty() {
            errors.push(format!("empty activity id (activity named {:?})", act.name));
        } else if !seen.insert(act.activity_id.as_str()) {
            errors.push(format!("duplicate activity id: {}", act.activity_id));
        }
        for ph in act.placeholders() {
            if !act.input_schema.contains(&ph) {
                errors.push(format!(
                    "placeholder {{{ph}}} of activity {} not in its input schema",
                    act.activity_id
                ));
            }
        }
        let mut outs = BTreeSet::new();
        for field in &act.output_schema {
            if !outs.insert(field.as_str()) {
                errors.push(format!(
                    "duplicate output field {field} in activity {}",
                    act.activity_id
                ));
            }
        }
    }
    for (from, to) in &spec.edges {
        for end in [from, to] {
            if !seen.contains(end.as_str()) {
                errors.push(format!("edge {from}->{to} references undeclared activity {end}"));
            }
        }
    }
    if errors.is_empty() {
        if let Err(e) = topo_order(spec) {
            errors.push(e);
        }
    }
    ValidationReport { errors }
}

/// Kahn's algorithm with lexicographic tie-breaking. On a cycle, the error
/// names the activities left unordered: `cycle: a,b`.
pub fn topo_order(spec: &WorkflowSpec) -> Result<Vec<String>, String> {
    let ids: BTreeSet<&str> = spec.activities.iter().map(|a| a.activity_id.as_str()).collect();
    let mut indegree: BTreeMap<&str, usize> = ids.iter().map(|id| (*id, 0)).collect();
    let mut succ: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (from, to) in &spec.edges {
        if !ids.contains(from.as_str()) || !ids.contains(to.as_str()) {
            return Err(format!("edge {from}->{to} references undeclared activity"));
        }
        if succ.entry(from.as_str()).or_default().insert(to.as_str()) {
            *indegree.get_mut(to.as_str()).unwrap() += 1;
        }
    }
    let mut ready: BTreeSet<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut order = Vec::with_capacity(ids.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.to_string());
        if let Some(children) = succ.get(next) {
            for child in children {
                let d = indegree.get_mut(child).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(child);
                }
            }
        }
    }
    if order.len() != ids.len() {
        let left: Vec<&str> = indegree
            .iter()
            .filter(|(id, _)| !order.iter().any(|o| o == *id))
            .map(|(id, _)| *id)
            .collect();
        return Err(format!("cycle: {}", left.join(",")));
    }
    Ok(order)
}

/// One row of the work queue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: TaskId,
    pub activity_id: String,
    pub workflow_id: String,
    /// Partition key.
    pub worker_id: u32,
    /// Thread slot on the worker node (assigned at generation, overwritten with
    /// the executing thread index on completion).
    pub core_slot: u32,
    pub command_line: String,
    pub workspace: String,
    pub failure_trials: u32,
    pub std_out: String,
    pub start_time: Option<Millis>,
    pub end_time: Option<Millis>,
    pub status: TaskStatus,
    pub input_tuple_ids: Vec<TupleId>,
}

impl Task {
    pub fn duration_ms(&self) -> Option<u64> {
        match (self.start_time, self.end_time) {
            (Some(s), Some(e)) => Some(e.saturating_sub(s)),
            _ => None,
        }
    }

    /// Row-level invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(end) = self.end_time {
            if !self.status.is_terminal() {
                return Err(format!("task {} has end_time but is {}", self.task_id, self.status));
            }
            if let Some(start) = self.start_time {
                if end < start {
                    return Err(format!("task {} ends before it starts", self.task_id));
                }
            }
        }
        if self.status == TaskStatus::Running && self.start_time.is_none() {
            return Err(format!("task {} RUNNING without start_time", self.task_id));
        }
        if self.status == TaskStatus::Ready && (self.start_time.is_some() || self.end_time.is_some()) {
            return Err(format!("task {} READY with timestamps", self.task_id));
        }
        if self.core_slot < 1 {
            return Err(format!("task {} core_slot < 1", self.task_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainTuple {
    pub tuple_id: TupleId,
    pub activity_id: String,
    /// `None` for workflow inputs and for steering-derived tuples.
    pub produced_by_task: Option<TaskId>,
    pub fields: BTreeMap<String, Scalar>,
    #[serde(default)]
    pub raw_file_path: Option<String>,
    #[serde(default)]
    pub size_bytes: Option<u64>,
    /// Set on tuples created by a steering update: the tuple they replace.
    #[serde(default)]
    pub derived_from: Option<TupleId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProvKind {
    Used,
    GeneratedBy,
    SteeredBy,
}

impl ProvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProvKind::Used => "USED",
            ProvKind::GeneratedBy => "GENERATED_BY",
            ProvKind::SteeredBy => "STEERED_BY",
        }
    }
}

/// Provenance edge. For `SteeredBy`, `task_id` holds the steering action id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvLink {
    pub link_id: LinkId,
    pub kind: ProvKind,
    pub task_id: u64,
    pub tuple_id: TupleId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SteeringKind {
    UpdateInputs,
    Prune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringAction {
    pub action_id: ActionId,
    pub kind: SteeringKind,
    pub activity_id: String,
    pub predicate: Predicate,
    #[serde(default)]
    pub assignments: BTreeMap<String, Scalar>,
    pub issued_at: Millis,
    pub affected_task_ids: Vec<TaskId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Role {
    DataNode { index: u32 },
    Worker { index: u32 },
    Connector {
        index: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        port: Option<u16>,
    },
    Supervisor,
    SecondarySupervisor,
}

impl Role {
    fn kind(&self) -> &'static str {
        match self {
            Role::DataNode { .. } => "data_node",
            Role::Worker { .. } => "worker",
            Role::Connector { .. } => "connector",
            Role::Supervisor => "supervisor",
            Role::SecondarySupervisor => "secondary_supervisor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysicalNode {
    pub id: String,
    #[serde(default = "default_host")]
    pub hostname: String,
    pub roles: Vec<Role>,
}

fn default_host() -> String {
    "127.0.0.1".to_string()
}

fn default_threads() -> u32 {
    1
}

fn default_true() -> bool {
    true
}

/// Role placement over physical nodes. Doubles as the on-disk topology config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTopology {
    pub nodes: Vec<PhysicalNode>,
    #[serde(default = "default_threads")]
    pub threads_per_worker: u32,
    #[serde(default = "default_true")]
    pub replicate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_port: Option<u16>,
}

impl ClusterTopology {
    /// Every role on one machine, one physical node per worker; data nodes and
    /// connectors are spread over the first nodes.
    pub fn single_machine(workers: u32, data_nodes: u32, connectors: u32, threads: u32) -> Self {
        let n = workers.max(data_nodes).max(connectors).max(1);
        let nodes = (1..=n)
            .map(|i| {
                let mut roles = Vec::new();
                if i <= workers {
                    roles.push(Role::Worker { index: i });
                }
                if i <= data_nodes {
                    roles.push(Role::DataNode { index: i });
                }
                if i <= connectors {
                    roles.push(Role::Connector { index: i, port: None });
                }
                if i == 1 {
                    roles.push(Role::Supervisor);
                }
                if i == 2 || (n == 1 && i == 1) {
                    roles.push(Role::SecondarySupervisor);
                }
                PhysicalNode {
                    id: format!("n{i}"),
                    hostname: format!("node{i}"),
                    roles,
                }
            })
            .collect();
        ClusterTopology {
            nodes,
            threads_per_worker: threads.max(1),
            replicate: data_nodes >= 2,
            http_port: None,
        }
    }

    fn indices(&self, kind: &str) -> Vec<(u32, &PhysicalNode)> {
        let mut out: Vec<(u32, &PhysicalNode)> = self
            .nodes
            .iter()
            .flat_map(|n| {
                n.roles.iter().filter_map(move |r| match r {
                    Role::DataNode { index } if kind == "data_node" => Some((*index, n)),
                    Role::Worker { index } if kind == "worker" => Some((*index, n)),
                    Role::Connector { index, .. } if kind == "connector" => Some((*index, n)),
                    _ => None,
                })
            })
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    }

    pub fn worker_count(&self) -> u32 {
        self.indices("worker").len() as u32
    }

    pub fn data_node_count(&self) -> u32 {
        self.indices("data_node").len() as u32
    }

    pub fn connector_count(&self) -> u32 {
        self.indices("connector").len() as u32
    }

    /// `(worker index, physical node id)` pairs in worker order.
    pub fn workers(&self) -> Vec<(u32, String)> {
        self.indices("worker").into_iter().map(|(i, n)| (i, n.id.clone())).collect()
    }

    pub fn connectors(&self) -> Vec<(u32, String)> {
        self.indices("connector").into_iter().map(|(i, n)| (i, n.id.clone())).collect()
    }

    pub fn connector_endpoint(&self, index: u32) -> Option<(String, u16)> {
        self.nodes.iter().find_map(|n| {
            n.roles.iter().find_map(|r| match r {
                Role::Connector { index: i, port: Some(p) } if *i == index => {
                    Some((n.hostname.clone(), *p))
                }
                _ => None,
            })
        })
    }

    /// Hostname of the physical node running worker `worker_id`.
    pub fn hostname_of_worker(&self, worker_id: u32) -> String {
        self.indices("worker")
            .into_iter()
            .find(|(i, _)| *i == worker_id)
            .map(|(_, n)| n.hostname.clone())
            .unwrap_or_else(|| format!("worker{worker_id}"))
    }

    /// Hard errors fail validation; the returned strings are placement warnings.
    pub fn validate(&self) -> Result<Vec<String>, String> {
        let w = self.worker_count();
        let d = self.data_node_count();
        let c = self.connector_count();
        let sup = self
            .nodes
            .iter()
            .flat_map(|n| &n.roles)
            .filter(|r| **r == Role::Supervisor)
            .count();
        let sec = self
            .nodes
            .iter()
            .flat_map(|n| &n.roles)
            .filter(|r| **r == Role::SecondarySupervisor)
            .count();
        if w == 0 || d == 0 || c == 0 {
            return Err(format!(
                "topology needs at least one worker, data node and connector (got W={w}, D={d}, C={c})"
            ));
        }
        if sup != 1 {
            return Err(format!("exactly one supervisor required, found {sup}"));
        }
        if sec > 1 {
            return Err(format!("at most one secondary supervisor allowed, found {sec}"));
        }
        if self.threads_per_worker < 1 {
            return Err("threads_per_worker must be >= 1".into());
        }
        for kind in ["data_node", "worker", "connector"] {
            let idx: Vec<u32> = self.indices(kind).into_iter().map(|(i, _)| i).collect();
            let expect: Vec<u32> = (1..=idx.len() as u32).collect();
            if idx != expect {
                return Err(format!("{kind} indices must be 1..={}, got {idx:?}", idx.len()));
            }
        }
        let mut warnings = Vec::new();
        for node in &self.nodes {
            let mut kinds: Vec<&str> = node.roles.iter().map(Role::kind).collect();
            kinds.sort_unstable();
            for pair in kinds.windows(2) {
                if pair[0] == pair[1] {
                    warnings.push(format!("node {} hosts more than one {}", node.id, pair[0]));
                }
            }
        }
        warnings.dedup();
        if d == 1 && self.replicate {
            warnings.push("replication requested with a single data node: partitions have no replica".into());
        }
        if c == 1 {
            warnings.push("single connector: workers have no secondary connector".into());
        }
        Ok(warnings)
    }
}

impl crate::predicate::Row for Task {
    fn field(&self, name: &str) -> Option<ScalarRef<'_>> {
        Some(match name {
            "task_id" | "taskid" => ScalarRef::Int(self.task_id as i64),
            "activity_id" | "activity" | "act_id" => ScalarRef::Str(&self.activity_id),
            "workflow_id" | "workflow" => ScalarRef::Str(&self.workflow_id),
            "worker_id" | "worker" => ScalarRef::Int(self.worker_id as i64),
            "core_slot" | "core" => ScalarRef::Int(self.core_slot as i64),
            "command_line" => ScalarRef::Str(&self.command_line),
            "workspace" => ScalarRef::Str(&self.workspace),
            "failure_trials" => ScalarRef::Int(self.failure_trials as i64),
            "std_out" | "stdout" => ScalarRef::Str(&self.std_out),
            "start_time" | "starttime" => opt_int(self.start_time),
            "end_time" | "endtime" => opt_int(self.end_time),
            "status" => ScalarRef::Str(self.status.as_str()),
            _ => return None,
        })
    }
}

impl crate::predicate::Row for DomainTuple {
    fn field(&self, name: &str) -> Option<ScalarRef<'_>> {
        Some(match name {
            "tuple_id" => ScalarRef::Int(self.tuple_id as i64),
            "activity_id" | "activity" => ScalarRef::Str(&self.activity_id),
            "produced_by_task" => opt_int(self.produced_by_task),
            "raw_file_path" => match &self.raw_file_path {
                Some(p) => ScalarRef::Str(p),
                None => ScalarRef::Null,
            },
            "size_bytes" => opt_int(self.size_bytes),
            "derived_from" => opt_int(self.derived_from),
            other => return self.fields.get(other).map(Scalar::as_ref),
        })
    }
}

impl crate::predicate::Row for ProvLink {
    fn field(&self, name: &str) -> Option<ScalarRef<'_>> {
        Some(match name {
            "link_id" => ScalarRef::Int(self.link_id as i64),
            "kind" => ScalarRef::Str(self.kind.as_str()),
            "task_id" => ScalarRef::Int(self.task_id as i64),
            "tuple_id" => ScalarRef::Int(self.tuple_id as i64),
            _ => return None,
        })
    }
}

fn opt_int(v: Option<u64>) -> ScalarRef<'static> {
    match v {
        Some(v) => ScalarRef::Int(v as i64),
        None => ScalarRef::Null,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(id: &str) -> ActivitySpec {
        ActivitySpec {
            activity_id: id.into(),
            name: id.into(),
            operator: Operator::Map,
            command_template: "/run a={a}".into(),
            input_schema: vec!["a".into()],
            output_schema: vec!["a".into()],
            mean_duration_ms: 0,
            workspace: None,
        }
    }

    fn wf(ids: &[&str], edges: &[(&str, &str)]) -> WorkflowSpec {
        WorkflowSpec {
            workflow_id: "wf".into(),
            activities: ids.iter().map(|i| act(i)).collect(),
            edges: edges.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            input_schema: vec!["a".into()],
        }
    }

    #[test]
    fn seven_activity_chain_is_valid_and_ordered() {
        let ids = ["a1", "a2", "a3", "a4", "a5", "a6", "a7"];
        let edges: Vec<(&str, &str)> = ids.windows(2).map(|w| (w[0], w[1])).collect();
        let spec = wf(&ids, &edges);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.topo_order().unwrap(), ids.map(String::from).to_vec());
    }

    #[test]
    fn empty_and_cyclic_workflows_are_rejected() {
        let empty = wf(&[], &[]);
        assert_eq!(empty.validate().errors, vec!["no activities".to_string()]);

        let cyclic = wf(&["a", "b"], &[("a", "b"), ("b", "a")]);
        let report = cyclic.validate();
        assert_eq!(report.errors, vec!["cycle: a,b".to_string()]);
        assert_eq!(cyclic.topo_order().unwrap_err(), "cycle: a,b");
    }

    #[test]
    fn topo_order_breaks_ties_lexicographically() {
        let spec = wf(&["d", "c", "b", "a"], &[("a", "c"), ("a", "b"), ("b", "d"), ("c", "d")]);
        assert_eq!(spec.topo_order().unwrap(), vec!["a", "b", "c", "d"]);
        let chain = wf(&["a3", "a1", "a2"], &[("a1", "a2"), ("a2", "a3")]);
        assert_eq!(chain.topo_order().unwrap(), vec!["a1", "a2", "a3"]);
    }

    #[test]
    fn placeholder_and_schema_errors_name_the_element() {
        let mut spec = wf(&["a"], &[]);
        spec.activities[0].command_template = "/run q={q}".into();
        spec.activities[0].output_schema = vec!["x".into(), "x".into()];
        let errs = spec.validate().errors;
        assert!(errs.iter().any(|e| e.contains("{q}")), "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("duplicate output field x")), "{errs:?}");

        let dangling = wf(&["a"], &[("a", "zz")]);
        assert!(dangling.validate().errors[0].contains("zz"));
        let dup = wf(&["a", "a"], &[]);
        assert!(dup.validate().errors[0].contains("duplicate activity id"));
    }

    #[test]
    fn render_substitutes_single_and_reduce_inputs() {
        let mut t1 = BTreeMap::new();
        t1.insert("a".to_string(), Scalar::Num(1.3));
        t1.insert("b".to_string(), Scalar::Num(27.75));
        let rendered = render_command("/run a={a} b={b}", [&t1]).unwrap();
        assert_eq!(rendered, "/run a=1.3 b=27.75");

        let mut t2 = BTreeMap::new();
        t2.insert("a".to_string(), Scalar::Int(2));
        t2.insert("b".to_string(), Scalar::Int(5));
        assert_eq!(render_command("/sum {a}", [&t1, &t2]).unwrap(), "/sum 1.3,2");
        assert_eq!(render_command("/run {zz}", [&t1]).unwrap_err(), "missing field zz");
    }

    #[test]
    fn transitions_follow_the_state_machine() {
        use TaskStatus::*;
        assert!(Ready.can_transition(Running));
        assert!(Running.can_transition(Finished));
        assert!(Running.can_transition(Ready));
        assert!(Running.can_transition(Aborted));
        assert!(!Ready.can_transition(Finished));
        assert!(!Finished.can_transition(Running));
        assert!(!Aborted.can_transition(Ready));
    }

    #[test]
    fn scalar_comparisons_cross_types() {
        let two = Scalar::Int(2);
        assert_eq!(ScalarRef::Str("2").compare(&two.as_ref()), Some(Ordering::Equal));
        assert_eq!(ScalarRef::Num(0.55).compare(&ScalarRef::Num(0.6)), Some(Ordering::Less));
        assert_eq!(ScalarRef::Null.compare(&ScalarRef::Int(1)), None);
        assert_eq!(Scalar::parse_text("27"), Scalar::Int(27));
        assert!(matches!(Scalar::parse_text("27.75"), Scalar::Num(_)));
        assert!(matches!(Scalar::parse_text("abc"), Scalar::Str(_)));
    }

    #[test]
    fn topology_validation() {
        let t = ClusterTopology::single_machine(4, 2, 2, 2);
        assert_eq!(t.worker_count(), 4);
        assert_eq!(t.data_node_count(), 2);
        assert!(t.validate().is_ok());
        let mut doubled = t.clone();
        doubled.nodes[0].roles.push(Role::Worker { index: 5 });
        let warnings = doubled.validate().unwrap();
        assert!(warnings.iter().any(|w| w.contains("more than one worker")));
        let mut no_sup = t.clone();
        for n in &mut no_sup.nodes {
            n.roles.retain(|r| *r != Role::Supervisor);
        }
        assert!(no_sup.validate().is_err());
    }
}
