//! Hash-space partitioning and sequence-number bookkeeping.
//!
//! Work is split across all `n` leaders at once: the client-id space is
//! hashed into `m·n` buckets, buckets are handed to leaders in proportion to
//! their per-epoch capacities, and the assignment rotates every epoch so no
//! leader can sit on a bucket forever. Sequence numbers are likewise dealt
//! out round-robin so the leaders' ranges interleave but never overlap.
//! Everything here is a pure function of its inputs; replicas recompute the
//! same assignments independently and must agree bit-for-bit.

use crate::types::{digest, ClientId, ReplicaId};
use std::collections::BTreeMap;

/// Bucket→leader assignment for one epoch.
#[derive(Clone, PartialEq, Eq, Debug, serde::Serialize)]
pub struct BucketMap {
    pub epoch: u64,
    /// Buckets-per-leader base parameter; the ring has `m·n` buckets.
    pub m: u64,
    /// `assignment[b]` is the leader serving bucket `b`.
    pub assignment: Vec<ReplicaId>,
}

impl BucketMap {
    pub fn bucket_count(&self) -> u64 {
        self.assignment.len() as u64
    }

    pub fn owner(&self, bucket: u64) -> ReplicaId {
        self.assignment[bucket as usize]
    }

    pub fn bucket_for(&self, client: ClientId) -> u64 {
        bucket_of(client, self.bucket_count())
    }

    pub fn leader_for(&self, client: ClientId) -> ReplicaId {
        self.owner(self.bucket_for(client))
    }

    /// Buckets served by `v`, ascending.
    pub fn buckets_of(&self, v: ReplicaId) -> Vec<u64> {
        (0..self.bucket_count()).filter(|&b| self.owner(b) == v).collect()
    }
}

/// Hash a client id onto the bucket ring: first eight digest bytes as a
/// little-endian integer, reduced mod the ring size.
pub fn bucket_of(client: ClientId, buckets: u64) -> u64 {
    let d = digest(&client.0.to_le_bytes());
    let mut first = [0u8; 8];
    first.copy_from_slice(&d.0[..8]);
    u64::from_le_bytes(first) % buckets
}

/// Split the `m·n` buckets across leaders in proportion to their capacities.
///
/// Each leader gets a guaranteed bucket plus a proportional share of the
/// remaining `(m−1)·n`: `⌊C_v/ΣC·(m−1)·n⌋ + 1`. Whatever the floors leave
/// over goes to the leaders whose count falls furthest below the exact
/// proportional share `C_v/ΣC·m·n` — i.e. the biggest value of
/// `base_v − C_v/ΣC·m·n` counted from the top — ties to the lowest id. The
/// comparison is done in exact integer arithmetic (scaled by `ΣC`) so every
/// replica resolves it identically.
pub fn buckets_per_leader(capacities: &[u64], m: u64) -> Vec<u64> {
    let n = capacities.len() as u64;
    let total = m * n;
    let sum: u128 = capacities.iter().map(|&c| c as u128).sum();
    debug_assert!(capacities.iter().all(|&c| c >= 1), "capacities must be positive");

    let mut counts: Vec<u64> = capacities
        .iter()
        .map(|&c| (c as u128 * (m - 1) as u128 * n as u128 / sum) as u64 + 1)
        .collect();
    let assigned: u64 = counts.iter().sum();
    let remainder = total - assigned;

    // residual_v · ΣC = base_v·ΣC − C_v·m·n
    let mut order: Vec<(i128, u64)> = capacities
        .iter()
        .enumerate()
        .map(|(v, &c)| {
            let key = counts[v] as i128 * sum as i128 - c as i128 * total as i128;
            (-key, v as u64) // sort ascending = biggest residual first
        })
        .collect();
    order.sort();
    for &(_, v) in order.iter().take(remainder as usize) {
        counts[v as usize] += 1;
    }
    counts
}

/// Lay the leaders' bucket arcs onto the ring for epoch `e`.
///
/// Leaders in id order receive contiguous arcs of their assigned sizes,
/// starting at ring offset `e mod m·n`. Rotating the start point each epoch
/// walks every bucket past every leader when sizes hold steady.
pub fn rotate_buckets(epoch: u64, m_v: &[u64], m: u64) -> BucketMap {
    let total: u64 = m_v.iter().sum();
    debug_assert_eq!(total, m * m_v.len() as u64);
    let offset = epoch % total;
    let mut assignment = vec![ReplicaId(0); total as usize];
    let mut ring = offset;
    for (v, &count) in m_v.iter().enumerate() {
        for _ in 0..count {
            assignment[ring as usize] = ReplicaId(v as u64);
            ring = (ring + 1) % total;
        }
    }
    BucketMap { epoch, m, assignment }
}

/// One leader's sequence numbers for an epoch: local number `i` (1-based)
/// denotes `globals[i-1]`. Carried-over numbers sit first.
#[derive(Clone, PartialEq, Eq, Debug, serde::Serialize)]
pub struct LeaderSlots {
    pub globals: Vec<u64>,
    pub hanging_count: usize,
}

impl LeaderSlots {
    pub fn capacity(&self) -> u64 {
        self.globals.len() as u64
    }

    /// Global sn for a 1-based local number.
    pub fn global_of(&self, local: u64) -> Option<u64> {
        self.globals.get(local as usize - 1).copied()
    }

    pub fn local_of(&self, global: u64) -> Option<u64> {
        self.globals.iter().position(|&g| g == global).map(|i| i as u64 + 1)
    }
}

/// Per-epoch sequence-number layout across all leaders.
#[derive(Clone, PartialEq, Eq, Debug, serde::Serialize)]
pub struct SeqAssignment {
    pub epoch: u64,
    pub per_leader: BTreeMap<ReplicaId, LeaderSlots>,
}

impl SeqAssignment {
    pub fn slots(&self, v: ReplicaId) -> &LeaderSlots {
        &self.per_leader[&v]
    }

    /// First global sn not at or below anything assigned here; the next
    /// epoch's fresh pool starts at least here.
    pub fn next_free_global(&self) -> u64 {
        self.per_leader
            .values()
            .flat_map(|s| s.globals.iter().copied())
            .max()
            .map_or(1, |g| g + 1)
    }

    /// Which leader a global sn belongs to, if any.
    pub fn leader_of_global(&self, global: u64) -> Option<ReplicaId> {
        self.per_leader
            .iter()
            .find(|(_, s)| s.globals.contains(&global))
            .map(|(&v, _)| v)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("{leader} carries {hanging} hanging sns but capacity is {capacity}")]
pub struct CapacityExceeded {
    pub leader: ReplicaId,
    pub hanging: usize,
    pub capacity: u64,
}

/// Deal sequence numbers for an epoch: each leader first inherits its
/// hanging numbers (sorted ascending), then fresh numbers from the pool
/// starting at `base`, handed out one per leader per round in id order until
/// every leader holds exactly its capacity.
pub fn distribute_seqnums(
    capacities: &[u64],
    hanging: &BTreeMap<ReplicaId, Vec<u64>>,
    base: u64,
    epoch: u64,
) -> Result<SeqAssignment, CapacityExceeded> {
    let mut per_leader = BTreeMap::new();
    let mut needs = Vec::with_capacity(capacities.len());
    for (v, &cap) in capacities.iter().enumerate() {
        let id = ReplicaId(v as u64);
        let mut globals = hanging.get(&id).cloned().unwrap_or_default();
        globals.sort_unstable();
        if globals.len() as u64 > cap {
            return Err(CapacityExceeded { leader: id, hanging: globals.len(), capacity: cap });
        }
        needs.push(cap - globals.len() as u64);
        per_leader.insert(id, LeaderSlots { hanging_count: globals.len(), globals });
    }
    let mut next = base;
    while needs.iter().any(|&r| r > 0) {
        for (v, need) in needs.iter_mut().enumerate() {
            if *need > 0 {
                per_leader.get_mut(&ReplicaId(v as u64)).unwrap().globals.push(next);
                next += 1;
                *need -= 1;
            }
        }
    }
    Ok(SeqAssignment { epoch, per_leader })
}

/// One leader's in-flight window over local sequence numbers: proposals are
/// admitted for `low < sn ≤ low + 2k`, and `low` tracks the leader's last
/// stable checkpoint.
#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize)]
pub struct Watermarks {
    pub low: u64,
    pub k: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("checkpoint at local sn {at} does not advance low watermark {low}")]
pub struct StaleCheckpoint {
    pub at: u64,
    pub low: u64,
}

impl Watermarks {
    pub fn new(k: u64) -> Self {
        Watermarks { low: 0, k }
    }

    pub fn high(&self) -> u64 {
        self.low + 2 * self.k
    }

    pub fn admits(&self, local_sn: u64) -> bool {
        self.low < local_sn && local_sn <= self.high()
    }

    /// Slide the window up to a newly stable checkpoint.
    pub fn advance(&mut self, stable_at: u64) -> Result<(), StaleCheckpoint> {
        debug_assert_eq!(stable_at % self.k, 0, "checkpoints sit on interval boundaries");
        if stable_at <= self.low {
            return Err(StaleCheckpoint { at: stable_at, low: self.low });
        }
        self.low = stable_at;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bucket_of_is_stable_and_in_range() {
        let c = ClientId(42);
        let b = bucket_of(c, 8);
        assert_eq!(b, bucket_of(c, 8));
        for id in 0..100 {
            assert!(bucket_of(ClientId(id), 8) < 8);
        }
    }

    #[test]
    fn bucket_of_spreads_clients_evenly() {
        let buckets = 8u64;
        let mut counts = vec![0u64; buckets as usize];
        for id in 0..10_000 {
            counts[bucket_of(ClientId(id), buckets) as usize] += 1;
        }
        let mean = 10_000 / buckets;
        for (b, &c) in counts.iter().enumerate() {
            assert!(
                c as i64 >= mean as i64 * 4 / 5 && c <= mean * 6 / 5,
                "bucket {b} got {c}, expected {mean} ±20%"
            );
        }
    }

    #[test]
    fn equal_capacities_split_evenly() {
        assert_eq!(buckets_per_leader(&[1, 1, 1, 1], 2), vec![2, 2, 2, 2]);
    }

    #[test]
    fn skewed_capacities_weight_the_split() {
        // bases [3,1,1,1]; residuals (scaled) put the two leftover buckets
        // on leaders 1 and 2 by lowest-id tie-break
        assert_eq!(buckets_per_leader(&[5, 1, 1, 1], 2), vec![3, 2, 2, 1]);
    }

    #[test]
    fn m1_always_gives_one_bucket_each() {
        assert_eq!(buckets_per_leader(&[7, 1, 1000, 3], 1), vec![1, 1, 1, 1]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn bucket_split_conserves_and_never_starves(
            caps in prop::collection::vec(1u64..10_000, 4..=13),
            m in 1u64..6,
        ) {
            let n = caps.len() as u64;
            let m_v = buckets_per_leader(&caps, m);
            prop_assert_eq!(m_v.iter().sum::<u64>(), m * n);
            prop_assert!(m_v.iter().all(|&c| c >= 1));
        }
    }

    #[test]
    fn rotation_is_periodic_in_ring_size() {
        let m_v = [2, 2, 2, 2];
        assert_eq!(rotate_buckets(3, &m_v, 2).assignment, rotate_buckets(11, &m_v, 2).assignment);
    }

    #[test]
    fn rotation_at_m1_is_a_cyclic_shift() {
        for e in 0..8 {
            let map = rotate_buckets(e, &[1, 1, 1, 1], 1);
            for b in 0..4u64 {
                let expect = (b + 4 - (e % 4)) % 4;
                assert_eq!(map.owner(b), ReplicaId(expect), "epoch {e} bucket {b}");
            }
        }
    }

    #[test]
    fn rotation_covers_all_pairs_within_ring_period() {
        let m_v = [2, 2, 2, 2];
        let mut seen = std::collections::HashSet::new();
        for e in 0..8 {
            let map = rotate_buckets(e, &m_v, 2);
            for b in 0..8 {
                seen.insert((b, map.owner(b)));
            }
        }
        assert_eq!(seen.len(), 8 * 4, "every (bucket, leader) pair occurs");
    }

    #[test]
    fn fresh_seqnums_interleave_round_robin() {
        let a = distribute_seqnums(&[2, 2, 2, 2], &BTreeMap::new(), 1, 1).unwrap();
        assert_eq!(a.slots(ReplicaId(0)).globals, vec![1, 5]);
        assert_eq!(a.slots(ReplicaId(1)).globals, vec![2, 6]);
        assert_eq!(a.slots(ReplicaId(2)).globals, vec![3, 7]);
        assert_eq!(a.slots(ReplicaId(3)).globals, vec![4, 8]);
        assert_eq!(a.next_free_global(), 9);
    }

    #[test]
    fn hanging_numbers_come_first_and_skip_the_pool() {
        let mut hanging = BTreeMap::new();
        hanging.insert(ReplicaId(1), vec![9]);
        let a = distribute_seqnums(&[1, 1, 1, 1], &hanging, 11, 2).unwrap();
        assert_eq!(a.slots(ReplicaId(0)).globals, vec![11]);
        assert_eq!(a.slots(ReplicaId(1)).globals, vec![9]);
        assert_eq!(a.slots(ReplicaId(1)).hanging_count, 1);
        assert_eq!(a.slots(ReplicaId(2)).globals, vec![12]);
        assert_eq!(a.slots(ReplicaId(3)).globals, vec![13]);
    }

    #[test]
    fn full_hanging_capacity_gets_no_fresh_numbers() {
        let mut hanging = BTreeMap::new();
        hanging.insert(ReplicaId(0), vec![3, 7]);
        let a = distribute_seqnums(&[2, 1, 1, 1], &hanging, 8, 2).unwrap();
        assert_eq!(a.slots(ReplicaId(0)).globals, vec![3, 7]);
        assert_eq!(a.slots(ReplicaId(0)).hanging_count, 2);
    }

    #[test]
    fn overfull_hanging_is_an_error() {
        let mut hanging = BTreeMap::new();
        hanging.insert(ReplicaId(2), vec![1, 2, 3]);
        let err = distribute_seqnums(&[2, 2, 2, 2], &hanging, 10, 2).unwrap_err();
        assert_eq!(err, CapacityExceeded { leader: ReplicaId(2), hanging: 3, capacity: 2 });
    }

    #[test]
    fn local_global_mapping_is_one_based() {
        let a = distribute_seqnums(&[2, 2, 2, 2], &BTreeMap::new(), 1, 1).unwrap();
        let s = a.slots(ReplicaId(2));
        assert_eq!(s.global_of(1), Some(3));
        assert_eq!(s.global_of(2), Some(7));
        assert_eq!(s.global_of(3), None);
        assert_eq!(s.local_of(7), Some(2));
        assert_eq!(a.leader_of_global(6), Some(ReplicaId(1)));
        assert_eq!(a.leader_of_global(99), None);
    }

    proptest! {
        #[test]
        fn seqnum_ranges_are_disjoint_and_sized(
            caps in prop::collection::vec(1u64..40, 4..=10),
            hang_fracs in prop::collection::vec(0u64..=100, 4..=10),
        ) {
            let n = caps.len();
            // carve hanging sets out of a fictional previous epoch 1..=100
            let mut hanging = BTreeMap::new();
            let mut prev = 1u64;
            for v in 0..n {
                let take = (caps[v] * hang_fracs[v % hang_fracs.len()] / 100).min(caps[v]);
                let set: Vec<u64> = (0..take).map(|i| prev + i).collect();
                prev += take;
                hanging.insert(ReplicaId(v as u64), set);
            }
            let a = distribute_seqnums(&caps, &hanging, prev.max(101), 5)?;
            let mut seen = std::collections::HashSet::new();
            for (v, slots) in &a.per_leader {
                prop_assert_eq!(slots.capacity(), caps[v.index()]);
                for &g in &slots.globals {
                    prop_assert!(seen.insert(g), "global sn {} assigned twice", g);
                }
            }
        }
    }

    #[test]
    fn watermarks_admit_a_2k_window() {
        let mut w = Watermarks::new(50);
        assert!(w.admits(1));
        assert!(w.admits(100));
        assert!(!w.admits(0));
        assert!(!w.admits(101));
        w.advance(50).unwrap();
        assert_eq!((w.low, w.high()), (50, 150));
        assert_eq!(w.advance(50), Err(StaleCheckpoint { at: 50, low: 50 }));
    }

    #[test]
    fn watermarks_advance_sequentially() {
        let mut w = Watermarks::new(5);
        w.advance(5).unwrap();
        w.advance(10).unwrap();
        assert_eq!((w.low, w.high()), (10, 20));
    }
}
