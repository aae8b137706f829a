//! Deterministic primary selection.
//!
//! The primary that conducts each epoch-change is chosen from history, not
//! elected: epochs `1..=n` explore every replica once in id order, and from
//! then on selection repeatedly serves the best `2f+1` replicas by their
//! last recorded turn's performance — except that a replica whose last turn
//! is exactly `g` epochs old is re-evaluated immediately, preempting the
//! rotation for that one epoch. With `g ≥ 3f+1` a stalling replica still
//! gets a turn every `g` epochs (so honest replicas that were unlucky once
//! can recover), but no more: in steady state faulty replicas conduct at
//! most an `f/g` fraction of epochs.
//!
//! Every correct replica replays the same records in the same order, so the
//! selection needs no communication of its own.

use crate::types::{ReplicaId, SystemParams};

#[derive(Clone, Copy, PartialEq, Eq, Debug, serde::Serialize)]
pub enum SelectionReason {
    /// Initial pass, epochs 1..=n in id order.
    Explore,
    /// Served from the current best-2f+1 block.
    Exploit,
    /// Last turn fell out of the g-epoch window.
    ReEvaluate,
}

impl std::fmt::Display for SelectionReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionReason::Explore => "explore",
            SelectionReason::Exploit => "exploit",
            SelectionReason::ReEvaluate => "re-evaluate",
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RotationError {
    #[error("epoch {epoch} primary is {expected}, not {got}")]
    NotPrimary { epoch: u64, expected: ReplicaId, got: ReplicaId },
    #[error("records must be sequential: expected epoch {expected}, got {got}")]
    OutOfSequence { expected: u64, got: u64 },
}

#[derive(Clone, Copy, Default, Debug)]
struct Turn {
    last_turn: Option<u64>,
    perf: u64,
}

/// Replicated record of who conducted each epoch and how it went.
#[derive(Clone, Debug)]
pub struct PrimaryHistory {
    params: SystemParams,
    g: u64,
    turns: Vec<Turn>,
    /// Current exploit block, stalest-first; `block_pos` marks how many of
    /// its slots have been consumed.
    block: Vec<ReplicaId>,
    block_pos: usize,
    recorded_through: u64,
}

impl PrimaryHistory {
    pub fn new(params: SystemParams, g: u64) -> Self {
        let floor = 3 * params.f as u64 + 1;
        assert!(g >= floor, "window g={g} must be at least 3f+1={floor}");
        PrimaryHistory {
            params,
            g,
            turns: vec![Turn::default(); params.n],
            block: Vec::new(),
            block_pos: 0,
            recorded_through: 0,
        }
    }

    pub fn window(&self) -> u64 {
        self.g
    }

    /// The epoch the next record must describe.
    pub fn next_epoch(&self) -> u64 {
        self.recorded_through + 1
    }

    fn re_evaluation_candidate(&self, e: u64) -> Option<ReplicaId> {
        let cutoff = e.checked_sub(self.g)?;
        let mut hits = self
            .turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.last_turn == Some(cutoff))
            .map(|(v, _)| ReplicaId(v as u64));
        let first = hits.next();
        debug_assert!(hits.next().is_none(), "one primary per epoch keeps last turns distinct");
        first
    }

    /// Age key: staler sorts first, never-served stalest of all.
    fn staleness(&self, v: ReplicaId) -> (u64, u64) {
        (self.turns[v.index()].last_turn.unwrap_or(0), v.0)
    }

    /// Rank all replicas by last-turn performance (ties to the staler, then
    /// the lower id), keep the top 2f+1, and order those stalest-first for
    /// serving.
    fn compute_block(&self) -> Vec<ReplicaId> {
        let mut ranked: Vec<ReplicaId> = self.params.replicas().collect();
        ranked.sort_by_key(|&v| {
            let t = &self.turns[v.index()];
            (std::cmp::Reverse(t.perf), self.staleness(v))
        });
        ranked.truncate(self.params.quorum());
        ranked.sort_by_key(|&v| self.staleness(v));
        ranked
    }

    /// Who conducts epoch `e`, and why. `e` must be the next unrecorded
    /// epoch; state only changes via [`record_epoch`](Self::record_epoch).
    pub fn next_primary(&self, e: u64) -> (ReplicaId, SelectionReason) {
        debug_assert_eq!(e, self.next_epoch());
        if e <= self.params.n as u64 {
            return (ReplicaId(e - 1), SelectionReason::Explore);
        }
        if let Some(u) = self.re_evaluation_candidate(e) {
            return (u, SelectionReason::ReEvaluate);
        }
        let v = if self.block_pos < self.block.len() {
            self.block[self.block_pos]
        } else {
            self.compute_block()[0]
        };
        (v, SelectionReason::Exploit)
    }

    /// Record epoch `e`'s outcome: `primary` conducted it and `committed`
    /// requests committed under it. A failed epoch-change is recorded the
    /// same way with zero committed — the slot is consumed either way.
    pub fn record_epoch(
        &mut self,
        e: u64,
        primary: ReplicaId,
        committed: u64,
    ) -> Result<SelectionReason, RotationError> {
        if e != self.next_epoch() {
            return Err(RotationError::OutOfSequence { expected: self.next_epoch(), got: e });
        }
        let (expected, reason) = self.next_primary(e);
        if primary != expected {
            return Err(RotationError::NotPrimary { epoch: e, expected, got: primary });
        }
        if reason == SelectionReason::Exploit {
            if self.block_pos >= self.block.len() {
                self.block = self.compute_block();
                self.block_pos = 0;
            }
            self.block_pos += 1;
        }
        self.turns[primary.index()] = Turn { last_turn: Some(e), perf: committed };
        self.recorded_through = e;
        Ok(reason)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> SystemParams {
        SystemParams::from_f(1)
    }

    /// Drive the history forward, reporting each epoch's selection with the
    /// given per-replica performance.
    fn run(h: &mut PrimaryHistory, epochs: u64, perf: impl Fn(ReplicaId) -> u64) -> Vec<(u64, ReplicaId, SelectionReason)> {
        let mut out = Vec::new();
        for _ in 0..epochs {
            let e = h.next_epoch();
            let (v, reason) = h.next_primary(e);
            h.record_epoch(e, v, perf(v)).unwrap();
            out.push((e, v, reason));
        }
        out
    }

    #[test]
    fn exploration_walks_ids_in_order() {
        let mut h = PrimaryHistory::new(params(), 13);
        let trace = run(&mut h, 4, |_| 10);
        let ids: Vec<u64> = trace.iter().map(|&(_, v, _)| v.0).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert!(trace.iter().all(|&(_, _, r)| r == SelectionReason::Explore));
    }

    #[test]
    fn weak_replica_returns_only_via_the_window() {
        let mut h = PrimaryHistory::new(params(), 13);
        let perf = |v: ReplicaId| if v.0 == 3 { 2 } else { 10 };
        let trace = run(&mut h, 2 * 13 + 4, perf);
        for &(e, v, reason) in trace.iter().skip(4) {
            if v.0 == 3 {
                assert_eq!(reason, SelectionReason::ReEvaluate, "epoch {e}");
            } else {
                assert_eq!(reason, SelectionReason::Exploit, "epoch {e}");
            }
        }
        // explored at 4, then re-evaluated exactly every g epochs
        let threes: Vec<u64> =
            trace.iter().filter(|&&(_, v, _)| v.0 == 3).map(|&(e, _, _)| e).collect();
        assert_eq!(threes, vec![4, 17, 30]);
    }

    #[test]
    fn equal_performance_ties_break_stalest_then_lowest_id() {
        let mut h = PrimaryHistory::new(params(), 13);
        run(&mut h, 4, |_| 10);
        // all equal: block must serve in last-turn order 0,1,2 (replica 3
        // loses the id tie-break for the third slot... all perf equal, so
        // staleness ranks 0,1,2 ahead of 3)
        let block = h.compute_block();
        assert_eq!(block, vec![ReplicaId(0), ReplicaId(1), ReplicaId(2)]);
    }

    #[test]
    fn higher_performance_outranks_staleness_in_membership() {
        let mut h = PrimaryHistory::new(params(), 13);
        // perf: r0=1 (stalest but weak), r1..r3 = 10
        run(&mut h, 4, |v| if v.0 == 0 { 1 } else { 10 });
        assert_eq!(h.compute_block(), vec![ReplicaId(1), ReplicaId(2), ReplicaId(3)]);
    }

    #[test]
    fn recording_wrong_primary_or_epoch_is_refused() {
        let mut h = PrimaryHistory::new(params(), 13);
        assert_eq!(
            h.record_epoch(1, ReplicaId(2), 5),
            Err(RotationError::NotPrimary { epoch: 1, expected: ReplicaId(0), got: ReplicaId(2) })
        );
        assert_eq!(
            h.record_epoch(3, ReplicaId(2), 5),
            Err(RotationError::OutOfSequence { expected: 1, got: 3 })
        );
    }

    #[test]
    fn new_record_reorders_the_next_block() {
        let mut h = PrimaryHistory::new(params(), 13);
        run(&mut h, 4, |v| if v.0 == 3 { 2 } else { 10 });
        // first exploit block cycles 0,1,2; replica 3's next strong turn
        // (via re-evaluation at 17) lifts it back into the following block
        run(&mut h, 12, |v| if v.0 == 3 { 2 } else { 10 });
        let e = h.next_epoch();
        assert_eq!(e, 17);
        let (v, reason) = h.next_primary(e);
        assert_eq!((v, reason), (ReplicaId(3), SelectionReason::ReEvaluate));
        h.record_epoch(17, ReplicaId(3), 50).unwrap();
        // the strong turn lifts 3 into the re-ranked block, and it serves
        // within the next 2f+1 epochs
        assert!(h.compute_block().contains(&ReplicaId(3)));
        let mut served = Vec::new();
        for _ in 0..3 {
            let e = h.next_epoch();
            let (v, _) = h.next_primary(e);
            h.record_epoch(e, v, 10).unwrap();
            served.push(v);
        }
        assert!(served.contains(&ReplicaId(3)));
    }

    #[test]
    fn at_most_one_window_candidate_across_a_long_run() {
        let mut h = PrimaryHistory::new(params(), 13);
        // deterministic but uneven performances
        let perf = |v: ReplicaId| [7, 13, 13, 5][v.index()];
        for _ in 0..1000 {
            let e = h.next_epoch();
            let candidates = h
                .turns
                .iter()
                .filter(|t| e >= h.g && t.last_turn == Some(e - h.g))
                .count();
            assert!(candidates <= 1, "epoch {e} has {candidates} window candidates");
            let (v, _) = h.next_primary(e);
            h.record_epoch(e, v, perf(v)).unwrap();
        }
    }

    #[test]
    fn every_replica_leads_within_any_window_after_exploration() {
        let mut h = PrimaryHistory::new(params(), 13);
        let trace = run(&mut h, 120, |v| if v.0 == 3 { 0 } else { 10 });
        let by_epoch: std::collections::BTreeMap<u64, ReplicaId> =
            trace.iter().map(|&(e, v, _)| (e, v)).collect();
        for start in 5..=(120 - 13) {
            for v in 0..4u64 {
                let served = (start..start + 13).any(|e| by_epoch[&e] == ReplicaId(v));
                assert!(served, "replica {v} missing from window starting at {start}");
            }
        }
    }

    #[test]
    fn stalling_replica_leads_an_f_over_g_fraction() {
        let g = 13u64;
        let mut h = PrimaryHistory::new(params(), g);
        let horizon = 5 * g + 20;
        let trace = run(&mut h, horizon, |v| if v.0 == 3 { 0 } else { 10 });
        // past the initial transient, each g-window holds exactly one epoch
        // led by the stalling replica
        let led: Vec<u64> =
            trace.iter().filter(|&&(_, v, _)| v.0 == 3).map(|&(e, _, _)| e).collect();
        for window_start in (g + 5)..(horizon - g) {
            let hits = led.iter().filter(|&&e| e >= window_start && e < window_start + g).count();
            assert_eq!(hits, 1, "window starting at {window_start}");
        }
        let steady: Vec<&u64> = led.iter().filter(|&&e| e > g).collect();
        let frac = steady.len() as f64 / (horizon - g) as f64;
        assert!((frac - 1.0 / g as f64).abs() < 0.02, "fraction {frac}");
    }
}
