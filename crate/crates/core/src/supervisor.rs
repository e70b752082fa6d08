//! Task generation with circular worker assignment, RUNNING-lease recovery,
//! and primary/standby supervisor takeover through the store's lease row.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{StoreError, StoreResult};
use crate::model::{render_command, ActivitySpec, Operator, Task, TaskStatus, WorkflowSpec};
use crate::predicate::Predicate;
use crate::protocol::{StoreApi, StoreClient};
use crate::taskstore::{CursorAdvance, GenerateRequest, Progress, SupervisorLease};

pub use crate::taskstore::GenerationCursor;

/// Worker ids for `n` consecutive tasks, cycling from `start` through `1..=workers`.
pub fn assign_worker_ids(n: usize, workers: u32, start: u32) -> Vec<u32> {
    let workers = workers.max(1);
    let start = start.clamp(1, workers);
    (0..n as u64)
        .map(|i| ((start as u64 - 1 + i) % workers as u64) as u32 + 1)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SupervisorConfig {
    pub name: String,
    pub workers: u32,
    pub threads_per_worker: u32,
    pub poll_interval: Duration,
    /// A standby takes over once the primary's heartbeat is older than this.
    pub takeover_timeout: Duration,
    /// RUNNING tasks older than `max(lease_factor × mean, lease_floor)` are reset.
    pub lease_factor: u64,
    pub lease_floor: Duration,
    pub max_retries: u32,
    /// Fault injection: when set, the loop stops on its next iteration as if
    /// the process had died (no completion mark, no lease release).
    pub crash: Arc<AtomicBool>,
}

impl SupervisorConfig {
    pub fn new(name: impl Into<String>, workers: u32, threads_per_worker: u32) -> Self {
        SupervisorConfig {
            name: name.into(),
            workers,
            threads_per_worker: threads_per_worker.max(1),
            poll_interval: Duration::from_millis(250),
            takeover_timeout: Duration::from_secs(2),
            lease_factor: 10,
            lease_floor: Duration::from_secs(5),
            max_retries: 3,
            crash: Arc::new(AtomicBool::new(false)),
        }
    }

    fn running_lease_ms(&self, act: &ActivitySpec) -> u64 {
        (self.lease_factor * act.mean_duration_ms).max(self.lease_floor.as_millis() as u64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisorOutcome {
    pub completed: bool,
    pub crashed: bool,
    pub took_over: bool,
    pub tasks_generated: usize,
    pub lease_resets: usize,
    pub completed_at: Option<u64>,
}

/// Result of one generation pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResolveOutcome {
    pub inserted: usize,
    /// True when nothing more can ever be generated and no task is active.
    pub workflow_done: bool,
}

fn make_task(
    workflow: &WorkflowSpec,
    act: &ActivitySpec,
    task_id: u64,
    worker_id: u32,
    cfg: &SupervisorConfig,
    inputs: &[&crate::model::DomainTuple],
) -> Task {
    let w = cfg.workers.max(1) as u64;
    let core_slot = (((task_id - 1) / w) % cfg.threads_per_worker as u64) as u32 + 1;
    let rendered = render_command(&act.command_template, inputs.iter().map(|t| &t.fields));
    let (command_line, status, std_out) = match rendered {
        Ok(cmd) => (cmd, TaskStatus::Ready, String::new()),
        Err(e) => (act.command_template.clone(), TaskStatus::Aborted, format!("render error: {e}")),
    };
    Task {
        task_id,
        activity_id: act.activity_id.clone(),
        workflow_id: workflow.workflow_id.clone(),
        worker_id,
        core_slot,
        command_line,
        workspace: act.workspace(),
        failure_trials: 0,
        std_out,
        start_time: None,
        end_time: None,
        status,
        input_tuple_ids: inputs.iter().map(|t| t.tuple_id).collect(),
    }
}

/// One generation pass over the workflow in topological order.
///
/// MAP and FILTER activities get one task per upstream tuple not yet
/// materialized. A REDUCE activity gets its single task once every upstream
/// activity is settled. The batch and the cursor advance commit together,
/// guarded by `lease` and the cursor position read at the start.
pub fn resolve_ready<C: StoreApi + ?Sized>(
    client: &C,
    workflow: &WorkflowSpec,
    lease: &SupervisorLease,
    cfg: &SupervisorConfig,
) -> StoreResult<ResolveOutcome> {
    let meta = client.metadata()?;
    let progress: Progress = client.progress()?;
    let order = workflow.topo_order().map_err(StoreError::Invalid)?;
    let mut next_task_id = meta.next_task_id;
    let mut next_worker = meta.next_worker;
    let mut tasks = Vec::new();
    let mut advance = CursorAdvance::default();
    let mut settled: BTreeMap<&str, bool> = BTreeMap::new();

    for act_id in &order {
        let act = workflow.activity(act_id).expect("topo order names declared activities");
        let ups = workflow.upstream(act_id);
        let ups_settled = ups.iter().all(|u| settled.get(u).copied().unwrap_or(false));
        let active = progress.by_activity.get(act_id.as_str()).map(|c| c.active()).unwrap_or(0);
        let mut generated_here = false;
        let mut pending_left = false;

        match act.operator {
            Operator::Map | Operator::Filter => {
                // Skip the scan when no upstream tuple appeared since the last batch.
                let available = if workflow.is_source(act_id) {
                    meta.input_count as u64
                } else {
                    ups.iter()
                        .map(|u| progress.outputs_by_activity.get(*u).copied().unwrap_or(0))
                        .sum()
                };
                let done = meta.materialized.get(act_id.as_str()).copied().unwrap_or(0) as u64;
                let pending = if available > done {
                    client.pending_inputs(act_id)?
                } else {
                    Default::default()
                };
                if !pending.tuples.is_empty() {
                    let ids = assign_worker_ids(pending.tuples.len(), cfg.workers, next_worker);
                    for (tuple, worker) in pending.tuples.iter().zip(&ids) {
                        tasks.push(make_task(workflow, act, next_task_id, *worker, cfg, &[tuple]));
                        next_task_id += 1;
                    }
                    next_worker = ids.last().map(|w| w % cfg.workers.max(1) + 1).unwrap_or(next_worker);
                    advance
                        .materialized
                        .insert(act_id.clone(), pending.tuples.iter().map(|t| t.tuple_id).collect());
                    generated_here = true;
                }
            }
            Operator::Reduce => {
                let reduced = meta.reduced.iter().any(|r| r == act_id);
                if !reduced {
                    if ups_settled {
                        let pending = client.pending_inputs(act_id)?;
                        if !pending.tuples.is_empty() {
                            let refs: Vec<_> = pending.tuples.iter().collect();
                            let worker = assign_worker_ids(1, cfg.workers, next_worker)[0];
                            tasks.push(make_task(workflow, act, next_task_id, worker, cfg, &refs));
                            next_task_id += 1;
                            next_worker = worker % cfg.workers.max(1) + 1;
                            advance
                                .materialized
                                .insert(act_id.clone(), pending.tuples.iter().map(|t| t.tuple_id).collect());
                            generated_here = true;
                        }
                        advance.reduced.push(act_id.clone());
                    } else {
                        pending_left = true;
                    }
                }
            }
        }
        let is_settled = ups_settled && active == 0 && !generated_here && !pending_left;
        settled.insert(act_id.as_str(), is_settled);
    }

    let workflow_done = tasks.is_empty() && advance.reduced.is_empty() && settled.values().all(|s| *s);
    if tasks.is_empty() && advance.reduced.is_empty() {
        return Ok(ResolveOutcome {
            inserted: 0,
            workflow_done,
        });
    }
    advance.next_task_id = next_task_id;
    advance.next_worker = next_worker;
    let inserted = client.generate_tasks(GenerateRequest {
        holder: cfg.name.clone(),
        epoch: lease.epoch,
        expected_next_task_id: meta.next_task_id,
        tasks,
        advance,
    })?;
    Ok(ResolveOutcome {
        inserted,
        workflow_done: false,
    })
}

/// Resets RUNNING tasks whose claim is older than their activity's lease.
pub fn reset_expired<C: StoreApi + ?Sized>(
    client: &C,
    workflow: &WorkflowSpec,
    cfg: &SupervisorConfig,
) -> StoreResult<usize> {
    let now = client.now_ms()?;
    let running = client.tasks(Predicate::eq("status", "RUNNING"))?;
    let mut n = 0;
    for t in running {
        let Some(act) = workflow.activity(&t.activity_id) else { continue };
        let Some(start) = t.start_time else { continue };
        if now.saturating_sub(start) > cfg.running_lease_ms(act) {
            match client.fail_task(t.task_id, cfg.max_retries) {
                Ok(st) => {
                    log::info!("task {} lease expired; now {st}", t.task_id);
                    n += 1;
                }
                // Completed or reset concurrently.
                Err(StoreError::IllegalTransition { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(n)
}

fn run_with_lease<C: StoreApi + ?Sized>(
    client: &C,
    cfg: &SupervisorConfig,
    mut lease: SupervisorLease,
    took_over: bool,
) -> StoreResult<SupervisorOutcome> {
    let workflow = client.metadata()?.workflow.ok_or(StoreError::DatabaseNotCreated)?;
    let mut out = SupervisorOutcome {
        took_over,
        ..SupervisorOutcome::default()
    };
    let lease_scan_every = 4u32;
    let mut iter = 0u32;
    loop {
        if cfg.crash.load(Ordering::SeqCst) {
            out.crashed = true;
            return Ok(out);
        }
        lease = client.heartbeat(&cfg.name, lease.epoch)?;
        match resolve_ready(client, &workflow, &lease, cfg) {
            Ok(r) => {
                out.tasks_generated += r.inserted;
                if r.workflow_done {
                    out.completed_at = Some(client.mark_complete(&cfg.name, lease.epoch)?);
                    out.completed = true;
                    return Ok(out);
                }
                if r.inserted > 0 {
                    // Generated tasks may enable more right away (e.g. a
                    // REDUCE with nothing upstream); skip the sleep once.
                    iter += 1;
                    continue;
                }
            }
            Err(StoreError::CursorConflict { .. }) => {}
            Err(e) => return Err(e),
        }
        if iter % lease_scan_every == 0 {
            out.lease_resets += reset_expired(client, &workflow, cfg)?;
        }
        iter += 1;
        std::thread::sleep(cfg.poll_interval);
    }
}

/// Runs the primary supervisor until the workflow completes, the lease is
/// lost, or a crash is injected.
pub fn supervisor_loop<C: StoreApi + ?Sized>(client: &C, cfg: &SupervisorConfig) -> StoreResult<SupervisorOutcome> {
    let current = client.metadata()?.lease;
    let lease = client.acquire_lease(&cfg.name, current.epoch)?;
    run_with_lease(client, cfg, lease, false)
}

/// Decides whether a standby should take over given the current lease.
pub fn should_take_over(lease: &SupervisorLease, now_ms: u64, timeout: Duration, waited: Duration) -> bool {
    match lease.holder {
        Some(_) => now_ms.saturating_sub(lease.heartbeat_ms) > timeout.as_millis() as u64,
        None => waited > timeout,
    }
}

/// One takeover attempt: CAS on the lease row if the primary's heartbeat is
/// stale. Returns the new lease when this caller won.
pub fn takeover<C: StoreApi + ?Sized>(
    client: &C,
    cfg: &SupervisorConfig,
    waited: Duration,
) -> StoreResult<Option<SupervisorLease>> {
    let meta = client.metadata()?;
    let now = client.now_ms()?;
    if meta.completed_at.is_some() || !should_take_over(&meta.lease, now, cfg.takeover_timeout, waited) {
        return Ok(None);
    }
    match client.acquire_lease(&cfg.name, meta.lease.epoch) {
        Ok(l) => Ok(Some(l)),
        Err(StoreError::LeaseLost(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Standby supervisor: watches the primary's heartbeat and takes over when it
/// goes stale. Returns once the workflow is complete or `stop` is raised.
pub fn standby_loop<C: StoreApi + ?Sized>(
    client: &C,
    cfg: &SupervisorConfig,
    stop: &AtomicBool,
) -> StoreResult<SupervisorOutcome> {
    let started = Instant::now();
    loop {
        if stop.load(Ordering::SeqCst) || cfg.crash.load(Ordering::SeqCst) {
            return Ok(SupervisorOutcome::default());
        }
        if client.metadata()?.completed_at.is_some() {
            return Ok(SupervisorOutcome::default());
        }
        if let Some(lease) = takeover(client, cfg, started.elapsed())? {
            log::warn!("{} took over as supervisor at epoch {}", cfg.name, lease.epoch);
            return run_with_lease(client, cfg, lease, true);
        }
        std::thread::sleep(cfg.poll_interval);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_ids() {
        assert_eq!(assign_worker_ids(12, 2, 1), vec![1, 2, 1, 2, 1, 2, 1, 2, 1, 2, 1, 2]);
        assert_eq!(assign_worker_ids(5, 2, 1), vec![1, 2, 1, 2, 1]);
        assert_eq!(assign_worker_ids(4, 1, 1), vec![1; 4]);
        assert_eq!(assign_worker_ids(4, 3, 3), vec![3, 1, 2, 3]);
        assert!(assign_worker_ids(0, 3, 2).is_empty());
    }

    #[test]
    fn takeover_decision() {
        let fresh = SupervisorLease {
            holder: Some("p".into()),
            epoch: 1,
            heartbeat_ms: 1000,
        };
        let t = Duration::from_millis(500);
        assert!(!should_take_over(&fresh, 1200, t, Duration::ZERO));
        assert!(should_take_over(&fresh, 1000 + 3 * 500, t, Duration::ZERO));
        let vacant = SupervisorLease::default();
        assert!(!should_take_over(&vacant, 10_000, t, Duration::from_millis(100)));
        assert!(should_take_over(&vacant, 10_000, t, Duration::from_millis(600)));
    }
}
