//! Connectors: stateless relays between clients and the data nodes, the
//! worker-to-connector distribution rule, and client-side decorators for
//! failover and access timing.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{StoreError, StoreResult};
use crate::protocol::{Request, Response, StoreApi};
use crate::taskstore::{partition_of, AccessTimer, Store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorBinding {
    pub primary: u32,
    pub secondary: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectorMap {
    /// Worker id → its connectors.
    pub workers: BTreeMap<u32, ConnectorBinding>,
    /// Connector id → hosting physical node.
    pub hosts: BTreeMap<u32, String>,
    pub warnings: Vec<String>,
}

impl ConnectorMap {
    pub fn binding(&self, worker_id: u32) -> Option<ConnectorBinding> {
        self.workers.get(&worker_id).copied()
    }
}

/// Binds each worker to a primary and a secondary connector.
///
/// A worker sharing a physical node with a connector uses it as primary. The
/// other workers are dealt round-robin over connectors in id order, starting
/// after the last connector bound by co-location. The secondary is the next
/// connector after the primary, cyclically.
pub fn distribute(workers: &[(u32, String)], connectors: &[(u32, String)]) -> ConnectorMap {
    let mut conns: Vec<(u32, String)> = connectors.to_vec();
    conns.sort_by_key(|(id, _)| *id);
    let mut ws: Vec<(u32, String)> = workers.to_vec();
    ws.sort_by_key(|(id, _)| *id);
    let mut map = ConnectorMap {
        hosts: conns.iter().cloned().collect(),
        ..ConnectorMap::default()
    };
    if conns.is_empty() {
        map.warnings.push("no connectors configured".into());
        return map;
    }
    if conns.len() == 1 {
        map.warnings
            .push("single connector: workers have no secondary connector".into());
    }
    let secondary_of = |idx: usize| (conns.len() > 1).then(|| conns[(idx + 1) % conns.len()].0);

    let mut rest = Vec::new();
    let mut cursor = 0usize;
    for (w, node) in &ws {
        match conns.iter().position(|(_, host)| host == node) {
            Some(idx) => {
                map.workers.insert(
                    *w,
                    ConnectorBinding {
                        primary: conns[idx].0,
                        secondary: secondary_of(idx),
                    },
                );
                cursor = (idx + 1) % conns.len();
            }
            None => rest.push(*w),
        }
    }
    for w in rest {
        map.workers.insert(
            w,
            ConnectorBinding {
                primary: conns[cursor].0,
                secondary: secondary_of(cursor),
            },
        );
        cursor = (cursor + 1) % conns.len();
    }
    map
}

/// A broker in front of the store. It forwards requests unchanged and holds
/// no state besides its liveness flag.
pub struct Connector {
    id: u32,
    store: Arc<Store>,
    alive: AtomicBool,
    hop: Duration,
}

impl Connector {
    pub fn new(id: u32, store: Arc<Store>) -> Self {
        Self::with_hop(id, store, Duration::ZERO)
    }

    /// A connector that adds `hop` of latency to each relayed request.
    pub fn with_hop(id: u32, store: Arc<Store>, hop: Duration) -> Self {
        Connector {
            id,
            store,
            alive: AtomicBool::new(true),
            hop,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn kill(&self) {
        self.alive.store(false, Ordering::SeqCst);
    }

    pub fn revive(&self) {
        self.alive.store(true, Ordering::SeqCst);
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    /// Data node that serves `req`, or `None` for metadata and multi-partition
    /// requests, which any live node answers.
    pub fn route(&self, req: &Request) -> StoreResult<Option<u32>> {
        let pid = if let Some(w) = req.target_worker() {
            Some(partition_of(w, self.store.config().workers)?)
        } else if let Some(t) = req.target_task() {
            Some(
                self.store
                    .partition_of_task(t)
                    .ok_or(StoreError::UnknownTask(t))?,
            )
        } else {
            None
        };
        pid.map(|p| self.store.primary_of(p)).transpose()
    }
}

impl StoreApi for Connector {
    fn call(&self, req: Request) -> StoreResult<Response> {
        if !self.is_alive() {
            return Err(StoreError::ConnectorDown(self.id));
        }
        if !self.hop.is_zero() {
            std::thread::sleep(self.hop);
        }
        self.route(&req)?;
        self.store.call(req)
    }
}

/// Client-side connector failover. The first transport error on the primary
/// switches to the secondary for good; the failed request is resent there.
pub struct FailoverClient {
    routes: Vec<(u32, Arc<dyn StoreApi>)>,
    active: AtomicUsize,
}

impl FailoverClient {
    pub fn new(primary: (u32, Arc<dyn StoreApi>), secondary: Option<(u32, Arc<dyn StoreApi>)>) -> Self {
        let mut routes = vec![primary];
        routes.extend(secondary);
        FailoverClient {
            routes,
            active: AtomicUsize::new(0),
        }
    }

    pub fn active_connector(&self) -> u32 {
        self.routes[self.active.load(Ordering::SeqCst).min(self.routes.len() - 1)].0
    }

    pub fn switched(&self) -> bool {
        self.active.load(Ordering::SeqCst) > 0
    }
}

impl StoreApi for FailoverClient {
    fn call(&self, req: Request) -> StoreResult<Response> {
        loop {
            let idx = self.active.load(Ordering::SeqCst);
            let Some((id, route)) = self.routes.get(idx) else {
                return Err(StoreError::Unavailable("no live connector left".into()));
            };
            match route.call(req.clone()) {
                Err(e) if e.is_transport() => {
                    log::warn!("connector c{id} failed ({e}); switching");
                    if idx + 1 >= self.routes.len() {
                        self.active.store(self.routes.len(), Ordering::SeqCst);
                        return Err(StoreError::Unavailable(format!("all connectors failed, last: {e}")));
                    }
                    let _ = self
                        .active
                        .compare_exchange(idx, idx + 1, Ordering::SeqCst, Ordering::SeqCst);
                }
                other => return other,
            }
        }
    }
}

/// Books the wall time of every request under `node` and the request's
/// category, as seen by the caller.
pub struct TimedClient<C> {
    inner: C,
    node: String,
    timer: Arc<AccessTimer>,
}

impl<C: StoreApi> TimedClient<C> {
    pub fn new(inner: C, node: impl Into<String>, timer: Arc<AccessTimer>) -> Self {
        TimedClient {
            inner,
            node: node.into(),
            timer,
        }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: StoreApi> StoreApi for TimedClient<C> {
    fn call(&self, req: Request) -> StoreResult<Response> {
        let cat = req.category();
        let start = Instant::now();
        let out = self.inner.call(req);
        self.timer.record(&self.node, cat, start.elapsed());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nodes(spec: &[(u32, &str)]) -> Vec<(u32, String)> {
        spec.iter().map(|(i, n)| (*i, n.to_string())).collect()
    }

    /// Direct restatement of the two rules, used as the oracle.
    fn oracle(workers: &[(u32, String)], conns: &[(u32, String)]) -> BTreeMap<u32, u32> {
        let mut out = BTreeMap::new();
        let mut last = None;
        let mut rest = vec![];
        for (w, n) in workers {
            if let Some(i) = conns.iter().position(|(_, h)| h == n) {
                out.insert(*w, conns[i].0);
                last = Some(i);
            } else {
                rest.push(*w);
            }
        }
        let mut i = last.map(|l| l + 1).unwrap_or(0);
        for w in rest {
            out.insert(w, conns[i % conns.len()].0);
            i += 1;
        }
        out
    }

    #[test]
    fn co_location_first_then_round_robin() {
        let w = nodes(&[(1, "n1"), (2, "n2"), (3, "n3")]);
        let c = nodes(&[(1, "n1"), (2, "n4")]);
        let m = distribute(&w, &c);
        let got: Vec<(u32, Option<u32>)> = m.workers.values().map(|b| (b.primary, b.secondary)).collect();
        assert_eq!(got, vec![(1, Some(2)), (2, Some(1)), (1, Some(2))]);
        let prim: BTreeMap<u32, u32> = m.workers.iter().map(|(w, b)| (*w, b.primary)).collect();
        assert_eq!(prim, oracle(&w, &c));
    }

    #[test]
    fn single_connector_has_no_secondary() {
        let m = distribute(&nodes(&[(1, "a"), (2, "b")]), &nodes(&[(1, "z")]));
        assert!(m.workers.values().all(|b| b.primary == 1 && b.secondary.is_none()));
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn full_co_location_is_identity() {
        let w = nodes(&[(1, "n1"), (2, "n2"), (3, "n3")]);
        let m = distribute(&w, &w);
        for (wid, b) in &m.workers {
            assert_eq!(b.primary, *wid);
            assert_ne!(b.secondary, Some(*wid));
        }
    }

    #[test]
    fn round_robin_load_is_balanced_and_deterministic() {
        for nw in 1..=12u32 {
            for nc in 1..=5u32 {
                let w: Vec<(u32, String)> = (1..=nw).map(|i| (i, format!("w{i}"))).collect();
                let c: Vec<(u32, String)> = (1..=nc).map(|i| (i, format!("c{i}"))).collect();
                let m = distribute(&w, &c);
                assert_eq!(m, distribute(&w, &c));
                let mut load: BTreeMap<u32, u32> = (1..=nc).map(|i| (i, 0)).collect();
                for b in m.workers.values() {
                    *load.get_mut(&b.primary).unwrap() += 1;
                    if nc >= 2 {
                        assert_ne!(Some(b.primary), b.secondary);
                    }
                }
                let max = load.values().max().unwrap();
                let min = load.values().min().unwrap();
                assert!(max - min <= 1);
            }
        }
    }
}
