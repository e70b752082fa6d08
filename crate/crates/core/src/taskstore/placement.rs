use serde::{Deserialize, Serialize};

use crate::error::{StoreError, StoreResult};

/// Where a work-queue partition lives. Data nodes are numbered from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlacement {
    pub partition_id: u32,
    pub primary_data_node: u32,
    pub replica_data_node: Option<u32>,
}

/// Assigns `workers` partitions to `data_nodes` nodes: primaries round-robin,
/// the replica of a partition on the node after its primary. Returns the
/// placements and any availability warnings.
pub fn allocate_partitions(
    workers: u32,
    data_nodes: u32,
    replicate: bool,
) -> StoreResult<(Vec<PartitionPlacement>, Vec<String>)> {
    if workers < 1 || data_nodes < 1 {
        return Err(StoreError::Config(format!(
            "need W >= 1 and D >= 1 (got W={workers}, D={data_nodes})"
        )));
    }
    let mut warnings = Vec::new();
    if replicate && data_nodes == 1 {
        warnings.push(
            "replication requested with one data node: partitions run without a replica".to_string(),
        );
    }
    let placements = (1..=workers)
        .map(|p| {
            let primary = (p - 1) % data_nodes + 1;
            let replica = (replicate && data_nodes >= 2).then(|| primary % data_nodes + 1);
            PartitionPlacement {
                partition_id: p,
                primary_data_node: primary,
                replica_data_node: replica,
            }
        })
        .collect();
    Ok((placements, warnings))
}

/// Identity hash: worker `i` owns partition `i`.
pub fn partition_of(worker_id: u32, workers: u32) -> StoreResult<u32> {
    if worker_id < 1 || worker_id > workers {
        return Err(StoreError::WorkerOutOfRange { worker_id, workers });
    }
    Ok(worker_id)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    #[test]
    fn single_data_node_hosts_both_partitions_without_replicas() {
        let (pl, warnings) = allocate_partitions(2, 1, false).unwrap();
        assert!(warnings.is_empty());
        assert!(pl.iter().all(|p| p.primary_data_node == 1 && p.replica_data_node.is_none()));
        assert_eq!(pl.len(), 2);
    }

    #[test]
    fn four_partitions_two_nodes_alternate() {
        let (pl, _) = allocate_partitions(4, 2, true).unwrap();
        let prim: Vec<u32> = pl.iter().map(|p| p.primary_data_node).collect();
        let repl: Vec<Option<u32>> = pl.iter().map(|p| p.replica_data_node).collect();
        assert_eq!(prim, vec![1, 2, 1, 2]);
        assert_eq!(repl, vec![Some(2), Some(1), Some(2), Some(1)]);
    }

    #[test]
    fn one_partition_three_nodes() {
        let (pl, _) = allocate_partitions(1, 3, true).unwrap();
        assert_eq!(pl[0].primary_data_node, 1);
        assert_eq!(pl[0].replica_data_node, Some(2));
    }

    #[test]
    fn replicate_with_one_node_warns() {
        let (pl, warnings) = allocate_partitions(3, 1, true).unwrap();
        assert!(pl.iter().all(|p| p.replica_data_node.is_none()));
        assert_eq!(warnings.len(), 1);
    }

    /// Enumerates every (W, D) up to 12x6 and checks the placement invariants.
    #[test]
    fn placements_are_balanced_and_replicas_differ() {
        for w in 1..=12 {
            for d in 1..=6 {
                for replicate in [false, true] {
                    let (pl, _) = allocate_partitions(w, d, replicate).unwrap();
                    assert_eq!(pl.len() as u32, w);
                    let mut per_node: BTreeMap<u32, u32> = (1..=d).map(|n| (n, 0)).collect();
                    for p in &pl {
                        *per_node.get_mut(&p.primary_data_node).unwrap() += 1;
                        if let Some(r) = p.replica_data_node {
                            assert_ne!(r, p.primary_data_node);
                            assert!((1..=d).contains(&r));
                        } else {
                            assert!(!replicate || d == 1);
                        }
                    }
                    let max = per_node.values().max().unwrap();
                    let min = per_node.values().min().unwrap();
                    assert!(max - min <= 1, "W={w} D={d}: {per_node:?}");
                }
            }
        }
    }

    #[test]
    fn config_errors() {
        assert!(allocate_partitions(0, 1, false).is_err());
        assert!(allocate_partitions(1, 0, false).is_err());
    }

    #[test]
    fn partition_of_is_identity_in_range() {
        assert_eq!(partition_of(1, 2).unwrap(), 1);
        assert_eq!(partition_of(2, 2).unwrap(), 2);
        assert!(matches!(
            partition_of(3, 2),
            Err(StoreError::WorkerOutOfRange { worker_id: 3, workers: 2 })
        ));
        assert!(partition_of(0, 2).is_err());
    }
}
