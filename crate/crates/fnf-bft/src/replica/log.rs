//! Per-epoch bookkeeping: slot records, per-leader logs, and the active
//! configuration a replica operates under.
//!
//! Every replica keeps one [`LeaderLog`] per leader (including itself).  A log
//! tracks the leader's slots through the agreement phases, the rolling
//! checkpoint chain, and the watermark window that bounds how far ahead of the
//! last stable checkpoint the leader may run.

use crate::crypto::{CombinedSignature, PartialSignature};
use crate::partition::{BucketMap, SeqAssignment, Watermarks};
use crate::types::{digest_parts, CheckpointEvidence, Digest, EpochConfigWire, Pack, ReplicaId};
use std::collections::{BTreeMap, BTreeSet};

/// Agreement progress of a single slot, ordered.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Phase {
    /// Proposal known (body + identity); backup has or will send its prepare share.
    PrePrepared,
    /// 2f+1 prepare certificate formed or verified.
    Prepared,
    /// 2f+1 commit certificate formed or verified.
    Committed,
    /// Applied to the state machine.
    Executed,
}

/// One sequence-number slot in a leader's log.
///
/// Created when the proposal becomes known: at proposal time on the leader, on
/// pre-prepare receipt on a backup, or at epoch entry for re-run seeds.
#[derive(Clone, Debug)]
pub struct Slot {
    pub local: u64,
    pub global: u64,
    pub pack: Pack,
    pub digest: Digest,
    pub phase: Phase,
    pub prepared_cert: Option<CombinedSignature>,
    pub committed_cert: Option<CombinedSignature>,
    /// Leader only: verified foreign prepare shares, capped at 2f.
    pub prep_partials: Vec<PartialSignature>,
    /// Leader only: verified foreign commit shares, capped at 2f.
    pub commit_partials: Vec<PartialSignature>,
    /// Leader only: the share minted when signing the pre-prepare.  Doubles as
    /// the leader's own contribution when combining the prepare certificate.
    pub own_preprepare: Option<PartialSignature>,
    /// Backup only: prepare share sent (gates the canonical message order).
    pub prepare_sent: bool,
    /// Backup only: commit share sent.
    pub commit_sent: bool,
    /// Slot was pre-installed at epoch entry as a carried-over re-run.
    pub seeded: bool,
}

impl Slot {
    pub fn new(local: u64, global: u64, pack: Pack, seeded: bool) -> Self {
        let digest = pack.identity();
        Slot {
            local,
            global,
            pack,
            digest,
            phase: Phase::PrePrepared,
            prepared_cert: None,
            committed_cert: None,
            prep_partials: Vec::new(),
            commit_partials: Vec::new(),
            own_preprepare: None,
            prepare_sent: false,
            commit_sent: false,
            seeded,
        }
    }
}

/// Rolling checkpoint content for height `s`, chained from the content at
/// `s - k` over the identities of the slots in between.  Height 0 is the zero
/// digest.
pub fn checkpoint_content(
    leader: ReplicaId,
    epoch: u64,
    s: u64,
    prev: &Digest,
    idents: &[Digest],
) -> Digest {
    let mut parts: Vec<&[u8]> = vec![b"ckpt"];
    let lb = leader.0.to_le_bytes();
    let eb = epoch.to_le_bytes();
    let sb = s.to_le_bytes();
    parts.push(&lb);
    parts.push(&eb);
    parts.push(&sb);
    parts.push(&prev.0);
    for d in idents {
        parts.push(&d.0);
    }
    digest_parts(&parts)
}

/// Everything one replica tracks about one leader's lane for the current epoch.
#[derive(Clone, Debug)]
pub struct LeaderLog {
    pub leader: ReplicaId,
    pub capacity: u64,
    pub watermarks: Watermarks,
    /// Slots by local sequence number; pruned below the stable checkpoint.
    pub slots: BTreeMap<u64, Slot>,
    /// Proposal identities by local sequence number, kept for checkpoint
    /// content computation; pruned once folded into a stable checkpoint.
    pub idents: BTreeMap<u64, Digest>,
    /// Rolling checkpoint contents at multiples of k (plus height 0), grown
    /// whenever the identity prefix allows.
    pub contents: BTreeMap<u64, Digest>,
    /// Highest height with a known content (contents is contiguous up to it).
    pub content_through: u64,
    /// Own lane only: next local sequence number to propose.
    pub next_propose: u64,
    /// Locals above the stable low watermark with an observed commit
    /// certificate.  Achieved count = low + len.
    pub committed_above: BTreeSet<u64>,
    /// Contiguous execution/adoption baseline: all locals <= this are final.
    pub executed_local: u64,
    /// Stable checkpoints by height.
    pub stable: BTreeMap<u64, CheckpointEvidence>,
    /// Leader only: raw (unverified) foreign checkpoint shares per height,
    /// held until this replica has executed the height itself.
    pub raw_ckpt: BTreeMap<u64, BTreeMap<ReplicaId, PartialSignature>>,
    /// Leader only: verified foreign shares per height, capped at 2f.
    pub verified_ckpt: BTreeMap<u64, Vec<PartialSignature>>,
    /// Own share per height, minted when this replica executed the height.
    pub my_ckpt: BTreeMap<u64, PartialSignature>,
    /// Checkpoint certificates received before the local identity prefix could
    /// reproduce their content; retried as the prefix grows.  A few per height
    /// so one stale certificate cannot shadow the real one.
    pub pending_ckpt: BTreeMap<u64, Vec<(Digest, CombinedSignature)>>,
    /// Pre-prepares beyond the high watermark, waiting for it to advance.
    pub held_preprepares: BTreeMap<u64, crate::types::ProtocolMessage>,
    pub exhausted: bool,
}

impl LeaderLog {
    pub fn new(leader: ReplicaId, capacity: u64, k: u64) -> Self {
        let mut contents = BTreeMap::new();
        contents.insert(0, Digest::ZERO);
        LeaderLog {
            leader,
            capacity,
            watermarks: Watermarks::new(k),
            slots: BTreeMap::new(),
            idents: BTreeMap::new(),
            contents,
            content_through: 0,
            next_propose: 1,
            committed_above: BTreeSet::new(),
            executed_local: 0,
            stable: BTreeMap::new(),
            raw_ckpt: BTreeMap::new(),
            verified_ckpt: BTreeMap::new(),
            my_ckpt: BTreeMap::new(),
            pending_ckpt: BTreeMap::new(),
            held_preprepares: BTreeMap::new(),
            exhausted: false,
        }
    }

    /// Commit certificates observed in this lane: stable floor plus distinct
    /// certified slots above it.
    pub fn achieved(&self) -> u64 {
        self.watermarks.low + self.committed_above.len() as u64
    }

    /// A lane is spent only when the checkpoint floor has swept its whole
    /// capacity — not at the last commit. The final checkpoint certificate
    /// trails the last commit by a round trip, and exhaustion is what lets
    /// the epoch end: ending on the floor instead of the commit count means
    /// no epoch bookkeeping is ever still in flight when the change goes
    /// out.
    pub fn note_commit(&mut self, local: u64) {
        if local > self.watermarks.low {
            self.committed_above.insert(local);
        }
    }

    /// Record a proposal identity and extend the rolling content chain as far
    /// as the contiguous prefix now reaches.  Returns the heights whose
    /// contents became computable.
    pub fn register_ident(&mut self, local: u64, d: Digest, k: u64, epoch: u64) -> Vec<u64> {
        self.idents.insert(local, d);
        let mut newly = Vec::new();
        loop {
            let next = self.content_through + k;
            if next > self.capacity {
                break;
            }
            let have_all = (self.content_through + 1..=next).all(|s| self.idents.contains_key(&s));
            if !have_all {
                break;
            }
            let prev = self.contents[&self.content_through];
            let span: Vec<Digest> = (self.content_through + 1..=next)
                .map(|s| self.idents[&s])
                .collect();
            let c = checkpoint_content(self.leader, epoch, next, &prev, &span);
            newly.push(next);
            self.content_through = next;
            self.contents.insert(next, c);
        }
        newly
    }
}

/// The configuration a replica currently operates under, fixed at epoch entry.
#[derive(Clone, Debug)]
pub struct ActiveEpoch {
    pub epoch: u64,
    pub wire: EpochConfigWire,
    pub conf_id: Digest,
    pub buckets: BucketMap,
    pub slots: SeqAssignment,
}
