//! Store-access accounting.
//!
//! Every store request made by a role is timed on the caller side and booked
//! under the caller's node id and a request category. The headline figure is
//! the maximum, over nodes, of the per-node sum of access durations.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

/// Request categories. The scheduling path maps onto the first five; domain and
/// provenance registration outside task completion (workflow inputs, steering)
/// fall under `StoreDomain` and `StoreProv`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessCategory {
    ClaimReady,
    FetchInputs,
    InsertTasks,
    CompleteTask,
    FailTask,
    StoreDomain,
    StoreProv,
    SnapshotQuery,
    Other,
}

impl AccessCategory {
    pub const ALL: [AccessCategory; 9] = [
        AccessCategory::ClaimReady,
        AccessCategory::FetchInputs,
        AccessCategory::InsertTasks,
        AccessCategory::CompleteTask,
        AccessCategory::FailTask,
        AccessCategory::StoreDomain,
        AccessCategory::StoreProv,
        AccessCategory::SnapshotQuery,
        AccessCategory::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AccessCategory::ClaimReady => "claim_ready",
            AccessCategory::FetchInputs => "fetch_inputs",
            AccessCategory::InsertTasks => "insert_tasks",
            AccessCategory::CompleteTask => "complete_task",
            AccessCategory::FailTask => "fail_task",
            AccessCategory::StoreDomain => "store_domain",
            AccessCategory::StoreProv => "store_prov",
            AccessCategory::SnapshotQuery => "snapshot_query",
            AccessCategory::Other => "other",
        }
    }
}

impl fmt::Display for AccessCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryTotals {
    pub ms: f64,
    pub calls: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAccess {
    pub total_ms: f64,
    pub calls: u64,
    pub categories: BTreeMap<AccessCategory, CategoryTotals>,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessReport {
    pub nodes: BTreeMap<String, NodeAccess>,
    /// Largest per-node total: the "time spent accessing the store" figure.
    pub max_sum_ms: f64,
    pub max_sum_node: Option<String>,
}

impl AccessReport {
    /// Category totals summed over all nodes.
    pub fn category_totals(&self) -> BTreeMap<AccessCategory, CategoryTotals> {
        let mut out: BTreeMap<AccessCategory, CategoryTotals> = BTreeMap::new();
        for node in self.nodes.values() {
            for (cat, t) in &node.categories {
                let e = out.entry(*cat).or_default();
                e.ms += t.ms;
                e.calls += t.calls;
            }
        }
        out
    }

    /// Percentage of total access time per category. Empty when nothing was timed.
    pub fn breakdown_pct(&self) -> BTreeMap<AccessCategory, f64> {
        let totals = self.category_totals();
        let sum: f64 = totals.values().map(|t| t.ms).sum();
        if sum <= 0.0 {
            return BTreeMap::new();
        }
        totals.into_iter().map(|(c, t)| (c, 100.0 * t.ms / sum)).collect()
    }

    pub fn largest_category(&self) -> Option<AccessCategory> {
        self.category_totals()
            .into_iter()
            .max_by(|a, b| a.1.ms.total_cmp(&b.1.ms))
            .map(|(c, _)| c)
    }

    pub fn total_calls(&self) -> u64 {
        self.nodes.values().map(|n| n.calls).sum()
    }
}

#[derive(Debug, Default)]
pub struct AccessTimer {
    // (node, category) -> (microseconds, calls)
    inner: Mutex<BTreeMap<(String, AccessCategory), (u64, u64)>>,
    max_single_us: Mutex<u64>,
}

impl AccessTimer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, node: &str, category: AccessCategory, elapsed: Duration) {
        self.record_us(node, category, elapsed.as_micros() as u64);
    }

    pub fn record_us(&self, node: &str, category: AccessCategory, us: u64) {
        {
            let mut inner = self.inner.lock();
            let e = inner.entry((node.to_string(), category)).or_insert((0, 0));
            e.0 += us;
            e.1 += 1;
        }
        let mut max = self.max_single_us.lock();
        if us > *max {
            *max = us;
        }
    }

    /// Longest single access recorded so far, in milliseconds.
    pub fn max_single_ms(&self) -> f64 {
        *self.max_single_us.lock() as f64 / 1000.0
    }

    pub fn reset(&self) {
        self.inner.lock().clear();
        *self.max_single_us.lock() = 0;
    }

    pub fn report(&self) -> AccessReport {
        let inner = self.inner.lock();
        let mut nodes: BTreeMap<String, NodeAccess> = BTreeMap::new();
        for ((node, cat), (us, calls)) in inner.iter() {
            let n = nodes.entry(node.clone()).or_default();
            let ms = *us as f64 / 1000.0;
            n.total_ms += ms;
            n.calls += calls;
            n.categories.insert(*cat, CategoryTotals { ms, calls: *calls });
        }
        let (max_sum_node, max_sum_ms) = nodes
            .iter()
            .max_by(|a, b| a.1.total_ms.total_cmp(&b.1.total_ms))
            .map(|(n, a)| (Some(n.clone()), a.total_ms))
            .unwrap_or((None, 0.0));
        AccessReport {
            nodes,
            max_sum_ms,
            max_sum_node,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_zero() {
        let t = AccessTimer::new();
        let r = t.report();
        assert!(r.nodes.is_empty());
        assert_eq!(r.max_sum_ms, 0.0);
        assert!(r.breakdown_pct().is_empty());
    }

    #[test]
    fn max_sum_picks_the_busiest_node() {
        let t = AccessTimer::new();
        t.record("w1", AccessCategory::ClaimReady, Duration::from_millis(30));
        t.record("w2", AccessCategory::ClaimReady, Duration::from_millis(20));
        t.record("w2", AccessCategory::CompleteTask, Duration::from_millis(30));
        let r = t.report();
        assert_eq!(r.max_sum_ms, 50.0);
        assert_eq!(r.max_sum_node.as_deref(), Some("w2"));
    }

    #[test]
    fn category_totals_conserve_node_totals() {
        let t = AccessTimer::new();
        for (i, cat) in AccessCategory::ALL.iter().enumerate() {
            t.record_us("w1", *cat, 1000 + i as u64 * 17);
        }
        let r = t.report();
        let node = &r.nodes["w1"];
        let sum: f64 = node.categories.values().map(|c| c.ms).sum();
        assert!((sum - node.total_ms).abs() < 1e-9);
        let pct: f64 = r.breakdown_pct().values().sum();
        assert!((pct - 100.0).abs() < 0.1);
    }
}
