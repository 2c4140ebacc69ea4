use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::directory::{balance, refresh_global, BalanceStep, BucketId, GlobalDirectory, PartitionId};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Move {
    pub bucket: BucketId,
    pub from: PartitionId,
    pub to: PartitionId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalancePlan {
    pub id: u64,
    pub old: GlobalDirectory,
    pub new: GlobalDirectory,
    pub moves: Vec<Move>,
    pub targets: Vec<PartitionId>,
    pub trace: Vec<BalanceStep>,
}

impl RebalancePlan {
    /// Computes the plan for moving the current bucket layout onto
    /// `targets`. `locals` are the bucket sets reported by every partition;
    /// `version` is the version of the directory in force.
    pub fn compute(
        id: u64,
        locals: &[(PartitionId, Vec<BucketId>)],
        targets: &[PartitionId],
        version: u64,
    ) -> Result<Self> {
        let old = refresh_global(locals, version)?;
        let owners: BTreeMap<BucketId, Option<PartitionId>> = locals
            .iter()
            .flat_map(|(p, bs)| bs.iter().map(move |b| (*b, Some(*p))))
            .collect();
        let assignment = balance(&owners, targets, old.global_depth())?;
        let new = assignment.to_directory(old.version() + 1)?;
        let mut moves: Vec<Move> = assignment
            .buckets
            .iter()
            .filter_map(|(b, to)| {
                let from = owners[b].expect("every reported bucket has an owner");
                (from != *to).then_some(Move { bucket: *b, from, to: *to })
            })
            .collect();
        moves.sort();
        Ok(Self { id, old, new, moves, targets: targets.to_vec(), trace: assignment.trace })
    }

    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }

    pub fn outgoing(&self, from: PartitionId) -> impl Iterator<Item = &Move> {
        self.moves.iter().filter(move |m| m.from == from)
    }

    pub fn incoming(&self, to: PartitionId) -> impl Iterator<Item = &Move> {
        self.moves.iter().filter(move |m| m.to == to)
    }

    /// Partitions receiving at least one bucket.
    pub fn destinations(&self) -> Vec<PartitionId> {
        let mut d: Vec<_> = self.moves.iter().map(|m| m.to).collect();
        d.sort();
        d.dedup();
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(node: u32, slot: u32) -> PartitionId {
        PartitionId { node, slot }
    }

    fn grid(nodes: u32, slots: u32) -> Vec<PartitionId> {
        (0..nodes).flat_map(|n| (0..slots).map(move |s| p(n, s))).collect()
    }

    fn locals_of(dir: &GlobalDirectory) -> Vec<(PartitionId, Vec<BucketId>)> {
        let mut by: BTreeMap<PartitionId, Vec<BucketId>> = BTreeMap::new();
        for (slot, owner) in dir.entries().iter().enumerate() {
            by.entry(*owner).or_default().push(BucketId::new(slot as u64, dir.global_depth()).unwrap());
        }
        by.into_iter().collect()
    }

    #[test]
    fn balanced_layout_has_no_moves() {
        let parts = grid(4, 2);
        let dir = GlobalDirectory::round_robin(0, 5, &parts).unwrap();
        let plan = RebalancePlan::compute(1, &locals_of(&dir), &parts, 0).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.new.entries(), dir.entries());
    }

    #[test]
    fn adding_a_node_only_moves_onto_new_partitions() {
        let parts = grid(4, 2);
        let dir = GlobalDirectory::round_robin(0, 5, &parts).unwrap();
        let plan = RebalancePlan::compute(1, &locals_of(&dir), &grid(5, 2), 0).unwrap();
        assert_eq!(plan.moves.len(), 6);
        assert!(plan.moves.iter().all(|m| m.to.node == 4));
        assert_eq!(plan.new.version(), 2);
    }

    #[test]
    fn removing_a_node_moves_only_its_buckets() {
        let parts = grid(4, 1);
        let dir = GlobalDirectory::round_robin(0, 4, &parts).unwrap();
        let plan = RebalancePlan::compute(1, &locals_of(&dir), &grid(3, 1), 0).unwrap();
        assert!(plan.moves.iter().all(|m| m.from.node == 3));
        assert_eq!(plan.moves.len(), 4);
        let loads = plan.new.loads();
        assert_eq!(loads.values().max().unwrap() - loads.values().min().unwrap(), 1);
    }
}
