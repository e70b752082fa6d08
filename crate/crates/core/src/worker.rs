//! Worker node: a claim/dispatch coordinator feeding a pool of execution
//! threads, all bound to the worker's own partition.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{StoreError, StoreResult};
use crate::model::{ActivitySpec, DomainTuple, Operator, Scalar, Task, TaskId, WorkflowSpec};
use crate::protocol::{StoreApi, StoreClient};
use crate::taskstore::NewTuple;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub worker_id: u32,
    pub threads: u32,
    pub claim_batch: u32,
    pub retry_max: u32,
    pub backoff_min: Duration,
    pub backoff_max: Duration,
}

impl WorkerConfig {
    pub fn new(worker_id: u32, threads: u32) -> Self {
        let threads = threads.max(1);
        WorkerConfig {
            worker_id,
            threads,
            claim_batch: threads,
            retry_max: 3,
            backoff_min: Duration::from_millis(50),
            backoff_max: Duration::from_millis(500),
        }
    }

    pub fn with_backoff(mut self, min: Duration, max: Duration) -> Self {
        self.backoff_min = min;
        self.backoff_max = max.max(min);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub std_out: String,
    pub success: bool,
}

/// What an execution thread does with a claimed task.
pub trait Executor: Send + Sync {
    /// Runs one attempt. `None` means the attempt was abandoned (the thread
    /// reports nothing, as if its process had died).
    fn execute(&self, task: &Task, inputs: &[DomainTuple], activity: &ActivitySpec) -> Option<ExecOutcome>;
}

/// Parses `key=value` pairs separated by whitespace. Keys outside `schema`
/// are ignored; a schema key absent from the output is an error.
pub fn extract_outputs(std_out: &str, schema: &[String]) -> Result<BTreeMap<String, Scalar>, String> {
    let mut found: HashMap<&str, &str> = HashMap::new();
    for pair in std_out.split_whitespace() {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("malformed pair {pair:?}"))?;
        if k.is_empty() {
            return Err(format!("malformed pair {pair:?}"));
        }
        found.insert(k, v);
    }
    let mut out = BTreeMap::new();
    for key in schema {
        let v = found.get(key.as_str()).ok_or_else(|| format!("missing {key}"))?;
        out.insert(key.clone(), Scalar::parse_text(v));
    }
    Ok(out)
}

/// Builds the stored tuple for extracted fields; `raw_file_path` and
/// `size_bytes` are also lifted into their dedicated columns.
pub fn output_tuple(fields: BTreeMap<String, Scalar>) -> NewTuple {
    let raw_file_path = fields.get("raw_file_path").map(|v| v.to_string());
    let size_bytes = fields.get("size_bytes").and_then(|v| match v {
        Scalar::Int(n) if *n >= 0 => Some(*n as u64),
        _ => None,
    });
    NewTuple {
        fields,
        raw_file_path,
        size_bytes,
    }
}

/// Turns an attempt's stdout into output tuples for `activity`. A FILTER
/// task with empty output yields no tuple.
pub fn outputs_for(activity: &ActivitySpec, std_out: &str) -> Result<Vec<NewTuple>, String> {
    if activity.operator == Operator::Filter && std_out.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(vec![output_tuple(extract_outputs(std_out, &activity.output_schema)?)])
}

fn mix(seed: u64, task_id: TaskId, trial: u32, salt: u64) -> ChaCha8Rng {
    let s = seed
        ^ task_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (trial as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ salt.wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(s)
}

/// Duration of one attempt, uniform on `[0.5 mean, 1.5 mean]` and fully
/// determined by `(seed, task_id, trial)`.
pub fn sample_duration_ms(seed: u64, task_id: TaskId, trial: u32, mean_ms: u64) -> u64 {
    if mean_ms == 0 {
        return 0;
    }
    let mut rng = mix(seed, task_id, trial, 1);
    let lo = mean_ms as f64 * 0.5;
    let hi = mean_ms as f64 * 1.5;
    rng.gen_range(lo..=hi).round() as u64
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn num(inputs: &[DomainTuple], key: &str) -> f64 {
    inputs
        .iter()
        .filter_map(|t| t.fields.get(key).and_then(Scalar::as_f64))
        .sum()
}

/// The bundled synthetic task program: a pure function of the inputs.
///
/// - `a` becomes `frac(1.7 a + 0.13)`; `b` and `c` pass through.
/// - `x = a·b + c`, `y = a / c`.
/// - `cx = a + b`, `cy = b + c`, `cz = a + c`.
/// - `fl = frac(0.618 a b c)`.
/// - `raw_file_path` and `size_bytes` name a pretend output file.
///
/// REDUCE inputs are summed field-wise first. Other schema fields get a
/// deterministic value in `[0, 1)`.
pub fn synthetic_outputs(task: &Task, inputs: &[DomainTuple], activity: &ActivitySpec) -> Vec<(String, Scalar)> {
    let a = num(inputs, "a");
    let b = num(inputs, "b");
    let c = num(inputs, "c");
    let c_safe = if c == 0.0 { 1.0 } else { c };
    activity
        .output_schema
        .iter()
        .map(|f| {
            let v = match f.as_str() {
                "a" => Scalar::Num(round4((1.7 * a + 0.13).fract())),
                "b" => Scalar::Num(round4(b)),
                "c" => Scalar::Num(round4(c)),
                "x" => Scalar::Num(round4(a * b + c)),
                "y" => Scalar::Num(round4(a / c_safe)),
                "cx" => Scalar::Num(round4(a + b)),
                "cy" => Scalar::Num(round4(b + c)),
                "cz" => Scalar::Num(round4(a + c)),
                "fl" => Scalar::Num(round4((0.618 * a * b * c).abs().fract())),
                "raw_file_path" => Scalar::Str(format!("{}/t{}.raw", activity.workspace(), task.task_id)),
                "size_bytes" => Scalar::Int(1000 + (task.task_id as i64 * 7919) % 9000),
                other => {
                    let h = other.bytes().fold(task.task_id, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
                    Scalar::Num(round4((h % 10_000) as f64 / 10_000.0))
                }
            };
            (f.clone(), v)
        })
        .collect()
}

pub fn render_std_out(fields: &[(String, Scalar)]) -> String {
    fields
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Sleeps for the sampled duration, then prints the synthetic outputs.
pub struct SyntheticExecutor {
    pub seed: u64,
    /// Probability that an attempt fails.
    pub failure_prob: f64,
    /// Tasks whose first attempt is abandoned mid-run.
    pub abandon_first_attempt: BTreeSet<TaskId>,
    /// Multiplies every sampled duration (1.0 = as sampled).
    pub time_scale: f64,
    /// Attempts so far per task, to tell retries apart.
    attempts: Mutex<HashMap<TaskId, u32>>,
}

impl SyntheticExecutor {
    pub fn new(seed: u64) -> Self {
        SyntheticExecutor {
            seed,
            failure_prob: 0.0,
            abandon_first_attempt: BTreeSet::new(),
            time_scale: 1.0,
            attempts: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_failure_prob(mut self, p: f64) -> Self {
        self.failure_prob = p;
        self
    }

    pub fn abandoning(mut self, ids: impl IntoIterator<Item = TaskId>) -> Self {
        self.abandon_first_attempt.extend(ids);
        self
    }
}

impl Executor for SyntheticExecutor {
    fn execute(&self, task: &Task, inputs: &[DomainTuple], activity: &ActivitySpec) -> Option<ExecOutcome> {
        let attempt = {
            let mut a = self.attempts.lock();
            let n = a.entry(task.task_id).or_insert(0);
            *n += 1;
            *n
        };
        let trial = task.failure_trials;
        let ms = sample_duration_ms(self.seed, task.task_id, trial, activity.mean_duration_ms);
        let ms = (ms as f64 * self.time_scale).round() as u64;
        if attempt == 1 && self.abandon_first_attempt.contains(&task.task_id) {
            std::thread::sleep(Duration::from_millis(ms / 2));
            return None;
        }
        std::thread::sleep(Duration::from_millis(ms));
        let fail = self.failure_prob > 0.0 && mix(self.seed, task.task_id, trial, 2).gen::<f64>() < self.failure_prob;
        if fail {
            return Some(ExecOutcome {
                std_out: "error: injected failure".into(),
                success: false,
            });
        }
        Some(ExecOutcome {
            std_out: render_std_out(&synthetic_outputs(task, inputs, activity)),
            success: true,
        })
    }
}

/// Runs `command_line` through `sh -c` in the task's workspace.
#[derive(Debug, Default)]
pub struct ExternalExecutor;

impl Executor for ExternalExecutor {
    fn execute(&self, task: &Task, _inputs: &[DomainTuple], _activity: &ActivitySpec) -> Option<ExecOutcome> {
        let dir = Path::new(&task.workspace);
        if let Err(e) = std::fs::create_dir_all(dir) {
            return Some(ExecOutcome {
                std_out: format!("error: workspace {}: {e}", dir.display()),
                success: false,
            });
        }
        match Command::new("sh").arg("-c").arg(&task.command_line).current_dir(dir).output() {
            Ok(out) => Some(ExecOutcome {
                std_out: String::from_utf8_lossy(&out.stdout).trim_end().to_string(),
                success: out.status.success(),
            }),
            Err(e) => Some(ExecOutcome {
                std_out: format!("error: spawn: {e}"),
                success: false,
            }),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerStats {
    pub claimed: u64,
    pub finished: u64,
    pub failed: u64,
    pub abandoned: u64,
    pub empty_claims: u64,
    /// Most tasks this worker had in flight at once.
    pub peak_in_flight: u32,
}

struct Shared {
    stats: Mutex<WorkerStats>,
    fatal: Mutex<Option<StoreError>>,
    activities: Mutex<HashMap<String, ActivitySpec>>,
}

fn activity_for<C: StoreApi + ?Sized>(client: &C, shared: &Shared, id: &str) -> StoreResult<ActivitySpec> {
    if let Some(a) = shared.activities.lock().get(id) {
        return Ok(a.clone());
    }
    let wf: WorkflowSpec = client.metadata()?.workflow.ok_or(StoreError::DatabaseNotCreated)?;
    let mut cache = shared.activities.lock();
    for a in &wf.activities {
        cache.insert(a.activity_id.clone(), a.clone());
    }
    cache
        .get(id)
        .cloned()
        .ok_or_else(|| StoreError::UnknownActivity(id.to_string()))
}

/// Retries `op` while its partition is between a data-node failure and the
/// promotion of its replica.
fn retrying<T>(mut op: impl FnMut() -> StoreResult<T>) -> StoreResult<T> {
    let mut tries = 0;
    loop {
        match op() {
            Err(StoreError::PartitionUnavailable(p)) if tries < 100 => {
                log::debug!("partition {p} unavailable; retrying");
                tries += 1;
                std::thread::sleep(Duration::from_millis(20));
            }
            other => return other,
        }
    }
}

fn run_one<C: StoreApi + ?Sized>(
    client: &C,
    exec: &dyn Executor,
    shared: &Shared,
    cfg: &WorkerConfig,
    slot: u32,
    task: Task,
) -> StoreResult<()> {
    let activity = activity_for(client, shared, &task.activity_id)?;
    let inputs = retrying(|| client.fetch_inputs(task.task_id))?;
    let Some(outcome) = exec.execute(&task, &inputs, &activity) else {
        shared.stats.lock().abandoned += 1;
        return Ok(());
    };
    let outputs = if outcome.success {
        outputs_for(&activity, &outcome.std_out)
    } else {
        Err(outcome.std_out.clone())
    };
    match outputs {
        Ok(outputs) => match retrying(|| {
            client.complete_task(task.task_id, outcome.std_out.clone(), outputs.clone(), Some(slot))
        }) {
            Ok(_) => shared.stats.lock().finished += 1,
            // Reset by the supervisor's lease scan while we ran.
            Err(StoreError::IllegalTransition { .. }) => {}
            Err(e) => return Err(e),
        },
        Err(reason) => {
            log::debug!("task {} failed: {reason}", task.task_id);
            match retrying(|| client.fail_task(task.task_id, cfg.retry_max)) {
                Ok(_) => shared.stats.lock().failed += 1,
                Err(StoreError::IllegalTransition { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(())
}

/// Runs the worker until `shutdown` is raised or the store becomes
/// unreachable through every connector.
pub fn worker_loop(
    client: Arc<dyn StoreApi>,
    cfg: WorkerConfig,
    exec: Arc<dyn Executor>,
    shutdown: Arc<AtomicBool>,
) -> StoreResult<WorkerStats> {
    let shared = Arc::new(Shared {
        stats: Mutex::new(WorkerStats::default()),
        fatal: Mutex::new(None),
        activities: Mutex::new(HashMap::new()),
    });
    let (task_tx, task_rx): (Sender<Task>, Receiver<Task>) = unbounded();
    let (idle_tx, idle_rx) = unbounded::<()>();
    let mut handles = Vec::new();
    for slot in 1..=cfg.threads {
        let rx = task_rx.clone();
        let idle = idle_tx.clone();
        let client = client.clone();
        let exec = exec.clone();
        let shared = shared.clone();
        let cfg = cfg.clone();
        let h = std::thread::Builder::new()
            .name(format!("w{}-t{slot}", cfg.worker_id))
            .spawn(move || {
                for task in rx.iter() {
                    if let Err(e) = run_one(client.as_ref(), exec.as_ref(), &shared, &cfg, slot, task) {
                        log::error!("worker {} thread {slot}: {e}", cfg.worker_id);
                        shared.fatal.lock().get_or_insert(e);
                    }
                    let _ = idle.send(());
                }
            })
            .map_err(|e| StoreError::Unavailable(format!("spawn: {e}")))?;
        handles.push(h);
    }
    drop(task_rx);

    static TOKENS: AtomicU64 = AtomicU64::new(0);
    let token_base: u64 = rand::thread_rng().gen::<u64>() & !0xFFFF_FFFF;
    let mut idle = cfg.threads;
    let mut backoff = cfg.backoff_min;
    let result = loop {
        if shutdown.load(Ordering::SeqCst) {
            break Ok(());
        }
        if let Some(e) = shared.fatal.lock().take() {
            if e.is_transport() {
                break Err(e);
            }
            log::warn!("worker {}: {e}", cfg.worker_id);
        }
        while idle_rx.try_recv().is_ok() {
            idle += 1;
        }
        if idle == 0 {
            match idle_rx.recv_timeout(Duration::from_millis(100)) {
                Ok(()) => idle += 1,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break Ok(()),
            }
            continue;
        }
        let want = idle.min(cfg.claim_batch.max(1)) as usize;
        let token = token_base | (TOKENS.fetch_add(1, Ordering::SeqCst) & 0xFFFF_FFFF);
        match client.claim_ready(cfg.worker_id, want, Some(token)) {
            Ok(tasks) if tasks.is_empty() => {
                shared.stats.lock().empty_claims += 1;
                match idle_rx.recv_timeout(backoff) {
                    Ok(()) => idle += 1,
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => break Ok(()),
                }
                backoff = (backoff * 2).min(cfg.backoff_max);
            }
            Ok(tasks) => {
                backoff = cfg.backoff_min;
                {
                    let mut st = shared.stats.lock();
                    st.claimed += tasks.len() as u64;
                    let in_flight = cfg.threads - idle + tasks.len() as u32;
                    st.peak_in_flight = st.peak_in_flight.max(in_flight);
                }
                idle -= tasks.len() as u32;
                for t in tasks {
                    if task_tx.send(t).is_err() {
                        break;
                    }
                }
            }
            Err(e) if e.is_transport() => break Err(e),
            Err(e) => {
                log::warn!("worker {} claim failed: {e}", cfg.worker_id);
                std::thread::sleep(backoff);
            }
        }
    };
    drop(task_tx);
    for h in handles {
        let _ = h.join();
    }
    let stats = shared.stats.lock().clone();
    result.map(|_| stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn extracts_schema_fields() {
        let got = extract_outputs("x=18.71 y=6.77", &schema(&["x", "y"])).unwrap();
        assert_eq!(got["x"], Scalar::Num(18.71));
        assert_eq!(got["y"], Scalar::Num(6.77));
        assert_eq!(extract_outputs("x=18.71", &schema(&["x", "y"])).unwrap_err(), "missing y");
        let extra = extract_outputs("x=4.58 y=0.39 extra=1", &schema(&["x", "y"])).unwrap();
        assert_eq!(extra.len(), 2);
        assert!(extract_outputs("x=1 garbage", &schema(&["x"])).is_err());
    }

    #[test]
    fn durations_are_deterministic_and_bounded() {
        for id in 1..500 {
            let d = sample_duration_ms(7, id, 0, 200);
            assert!((100..=300).contains(&d));
            assert_eq!(d, sample_duration_ms(7, id, 0, 200));
        }
        let mean: f64 = (1..4001).map(|id| sample_duration_ms(3, id, 0, 1000) as f64).sum::<f64>() / 4000.0;
        assert!((mean - 1000.0).abs() < 20.0, "{mean}");
        assert_eq!(sample_duration_ms(1, 1, 0, 0), 0);
    }

    #[test]
    fn synthetic_output_round_trips_through_extraction() {
        let act = ActivitySpec {
            activity_id: "a1".into(),
            name: "gen".into(),
            operator: Operator::Map,
            command_template: "/run a={a}".into(),
            input_schema: schema(&["a", "b", "c"]),
            output_schema: schema(&["a", "b", "c", "x", "y", "raw_file_path", "size_bytes"]),
            mean_duration_ms: 0,
            workspace: None,
        };
        let input = DomainTuple {
            tuple_id: 1,
            activity_id: "input".into(),
            produced_by_task: None,
            fields: [("a", 1.3), ("b", 27.75), ("c", 16.21)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), Scalar::Num(v)))
                .collect(),
            raw_file_path: None,
            size_bytes: None,
            derived_from: None,
        };
        let task = Task {
            task_id: 1,
            activity_id: "a1".into(),
            workflow_id: "wf".into(),
            worker_id: 1,
            core_slot: 1,
            command_line: String::new(),
            workspace: String::new(),
            failure_trials: 0,
            std_out: String::new(),
            start_time: None,
            end_time: None,
            status: crate::model::TaskStatus::Running,
            input_tuple_ids: vec![1],
        };
        let fields = synthetic_outputs(&task, &[input], &act);
        let out = render_std_out(&fields);
        assert!(out.contains("x=52.285"), "{out}");
        let parsed = extract_outputs(&out, &act.output_schema).unwrap();
        let expected: BTreeMap<String, Scalar> = fields.into_iter().collect();
        assert_eq!(parsed, expected);
        let t = output_tuple(parsed);
        assert_eq!(t.raw_file_path.as_deref(), Some("/data/a1/t1.raw"));
        assert!(t.size_bytes.is_some());
    }
}
