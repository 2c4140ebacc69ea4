mod common;

use std::collections::BTreeMap;

use lsm_rebalance::directory::{balance, BalanceStep};
use lsm_rebalance::{BucketId, PartitionId};

use common::{hand_instances, random_case, reference_balance};

fn b(bits: u64, depth: u32) -> BucketId {
    BucketId::new(bits, depth).unwrap()
}

fn p(node: u32) -> PartitionId {
    PartitionId::new(node, 0)
}

#[test]
fn spread_bounded_by_largest_bucket_on_random_configs() {
    let o = common::criterion_2();
    assert!(o.passed, "{}", o.detail);
}

#[test]
fn worked_examples_by_hand() {
    let cases = hand_instances();
    let t0 = balance(&cases[0].buckets, &cases[0].targets, 2).unwrap();
    // largest first, ties by id: 00 -> P0, 01 -> P1, 10 -> P0, 11 -> P1
    assert_eq!(
        t0.trace,
        vec![
            BalanceStep::Place { bucket: b(0, 2), to: p(0) },
            BalanceStep::Place { bucket: b(1, 2), to: p(1) },
            BalanceStep::Place { bucket: b(2, 2), to: p(0) },
            BalanceStep::Place { bucket: b(3, 2), to: p(1) },
        ]
    );
    let t1 = balance(&cases[1].buckets, &cases[1].targets, 2).unwrap();
    assert_eq!(
        t1.trace,
        vec![
            BalanceStep::Move { bucket: b(0, 2), from: p(0), to: p(1) },
            BalanceStep::Move { bucket: b(1, 2), from: p(0), to: p(1) },
        ]
    );
    let t2 = balance(&cases[2].buckets, &cases[2].targets, 3).unwrap();
    assert_eq!(t2.trace, vec![BalanceStep::Place { bucket: b(0b101, 3), to: p(2) }]);
}

#[test]
fn reference_matches_on_twenty_instances() {
    let cases = hand_instances();
    assert_eq!(cases.len(), 20);
    for (i, c) in cases.iter().enumerate() {
        let a = balance(&c.buckets, &c.targets, c.depth).unwrap();
        let (owners, trace) = reference_balance(c);
        assert_eq!(a.trace, trace, "instance {i}");
        assert_eq!(a.buckets, owners, "instance {i}");
    }
}

#[test]
fn balance_never_widens_spread_without_membership_change() {
    for seed in 0..200 {
        let mut c = random_case(seed, 32, 6);
        // keep the old partition set so there is a before and after
        let before: Vec<PartitionId> = {
            let mut v: Vec<_> = c.buckets.values().flatten().copied().collect();
            v.sort();
            v.dedup();
            v
        };
        c.targets = before.clone();
        let load = |m: &BTreeMap<BucketId, PartitionId>| {
            let mut l: BTreeMap<PartitionId, u64> = before.iter().map(|p| (*p, 0)).collect();
            for (b, p) in m {
                *l.get_mut(p).unwrap() += 1 << (c.depth - b.depth());
            }
            l.values().max().unwrap() - l.values().min().unwrap()
        };
        let old: BTreeMap<_, _> = c.buckets.iter().map(|(b, p)| (*b, p.unwrap())).collect();
        let a = balance(&c.buckets, &c.targets, c.depth).unwrap();
        assert!(load(&a.buckets) <= load(&old), "seed {seed}");
        let n = c.buckets.len();
        assert!(a.trace.len() <= n * n, "seed {seed}");
    }
}

#[test]
fn planned_directory_covers_every_slot() {
    for seed in 0..50 {
        let c = random_case(seed, 40, 6);
        let a = balance(&c.buckets, &c.targets, c.depth).unwrap();
        let dir = a.to_directory(7).unwrap();
        assert_eq!(dir.entries().len(), 1 << c.depth);
        for (bucket, owner) in &a.buckets {
            assert_eq!(dir.owner_of(*bucket), Some(*owner), "seed {seed} {bucket}");
        }
    }
}
