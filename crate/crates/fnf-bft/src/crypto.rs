//! Deterministic `(2f+1)`-of-`n` threshold-signature mock and the
//! authenticator meter.
//!
//! The protocol's cost model counts *authenticator operations*: every
//! signature a replica computes and every signature it verifies. The mock
//! here reproduces the structure of a threshold scheme (partial shares,
//! a combination step, combined-certificate verification) with SHA-256 tags
//! so that runs are fast and bit-reproducible, while the meter records the
//! exact operation counts the analysis reasons about:
//!
//! * `sign_partial` — 1 computed.
//! * `combine` — 1 computed. The combiner's own share is folded into this
//!   step (`unmetered_share` derives it for free); collecting a quorum
//!   therefore costs the combiner exactly the foreign verifications plus one
//!   combination.
//! * `verify_partial` / `verify_combined` — 1 verified each, even when the
//!   value turns out to be invalid.
//!
//! Forgery resistance is structural, not cryptographic: the simulator only
//! ever signs on behalf of ids the calling node controls, so a tag that
//! verifies was necessarily produced by the matching signer.

use crate::types::{digest, Digest, ReplicaId};
use std::collections::{BTreeMap, BTreeSet};

/// Shared-secret suffix folded into every tag. A real deployment would use a
/// distributed key; the mock only needs determinism.
const MOCK_SECRET: &[u8] = b"threshold-mock-shared-secret";

pub(crate) fn mock_secret() -> &'static [u8] {
    MOCK_SECRET
}

/// One replica's share over a digest.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PartialSignature {
    pub signer: ReplicaId,
    pub over: Digest,
    pub tag: Digest,
}

/// A combined certificate: `2f+1` distinct shares over the same digest. The
/// tag binds the exact contributor set; the contributor list is bookkeeping
/// and is never trusted on its own.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CombinedSignature {
    pub over: Digest,
    pub contributors: BTreeSet<ReplicaId>,
    pub tag: Digest,
}

fn partial_tag(signer: ReplicaId, over: &Digest) -> Digest {
    let mut buf = Vec::with_capacity(76);
    buf.extend_from_slice(b"psig");
    buf.extend_from_slice(&signer.0.to_le_bytes());
    buf.extend_from_slice(&over.0);
    buf.extend_from_slice(MOCK_SECRET);
    digest(&buf)
}

fn combined_tag(over: &Digest, contributor_tags: &[Digest]) -> Digest {
    let mut sorted: Vec<&Digest> = contributor_tags.iter().collect();
    sorted.sort();
    let mut buf = Vec::with_capacity(36 + 32 * sorted.len());
    buf.extend_from_slice(b"csig");
    buf.extend_from_slice(&over.0);
    for t in sorted {
        buf.extend_from_slice(&t.0);
    }
    digest(&buf)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CombineError {
    #[error("combination needs {need} distinct valid shares, have {have}")]
    InsufficientPartials { have: usize, need: usize },
    #[error("shares cover different digests")]
    MixedDigests,
}

/// Which ledger column an operation lands in.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MeterClass {
    /// Normal epoch operation: request phases and checkpoints.
    Epoch,
    /// Epoch-change traffic: change objects, reliable broadcast, new-epoch
    /// validation.
    Change,
}

#[derive(Clone, Copy, Default, PartialEq, Eq, Debug, serde::Serialize)]
pub struct OpCounts {
    pub computed: u64,
    pub verified: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.computed + self.verified
    }
}

/// Per-epoch split of a replica's operation counts.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug, serde::Serialize)]
pub struct EpochOps {
    pub operation: OpCounts,
    pub change: OpCounts,
}

/// Running operation ledger for one replica. The owning state machine keeps
/// the context (current epoch, operation vs change) up to date; every
/// metered crypto call charges the current context.
#[derive(Clone, Debug, Default)]
pub struct AuthenticatorMeter {
    epoch: u64,
    class: Option<MeterClass>,
    total: OpCounts,
    per_epoch: BTreeMap<u64, EpochOps>,
}

impl AuthenticatorMeter {
    pub fn new() -> Self {
        AuthenticatorMeter { epoch: 0, class: Some(MeterClass::Epoch), ..Default::default() }
    }

    pub fn set_context(&mut self, epoch: u64, class: MeterClass) {
        self.epoch = epoch;
        self.class = Some(class);
    }

    pub fn context(&self) -> (u64, MeterClass) {
        (self.epoch, self.class.unwrap_or(MeterClass::Epoch))
    }

    fn bucket(&mut self) -> &mut OpCounts {
        let class = self.class.unwrap_or(MeterClass::Epoch);
        let e = self.per_epoch.entry(self.epoch).or_default();
        match class {
            MeterClass::Epoch => &mut e.operation,
            MeterClass::Change => &mut e.change,
        }
    }

    pub fn note_computed(&mut self) {
        self.total.computed += 1;
        self.bucket().computed += 1;
    }

    pub fn note_verified(&mut self) {
        self.total.verified += 1;
        self.bucket().verified += 1;
    }

    /// Totals since construction.
    pub fn snapshot(&self) -> OpCounts {
        self.total
    }

    pub fn epoch_ops(&self, epoch: u64) -> EpochOps {
        self.per_epoch.get(&epoch).copied().unwrap_or_default()
    }

    pub fn per_epoch(&self) -> &BTreeMap<u64, EpochOps> {
        &self.per_epoch
    }
}

/// Compute a share and charge one computed operation.
pub fn sign_partial(signer: ReplicaId, over: Digest, meter: &mut AuthenticatorMeter) -> PartialSignature {
    meter.note_computed();
    PartialSignature { signer, over, tag: partial_tag(signer, &over) }
}

/// Derive a share without metering. Only for the combiner's own contribution,
/// whose cost is part of the combination step.
pub fn unmetered_share(signer: ReplicaId, over: Digest) -> PartialSignature {
    PartialSignature { signer, over, tag: partial_tag(signer, &over) }
}

/// Check a share against the claimed signer and digest. Always charges one
/// verified operation, valid or not.
pub fn verify_partial(
    p: &PartialSignature,
    claimed: ReplicaId,
    over: &Digest,
    meter: &mut AuthenticatorMeter,
) -> bool {
    meter.note_verified();
    p.signer == claimed && p.over == *over && p.tag == partial_tag(claimed, over)
}

fn share_is_valid(p: &PartialSignature) -> bool {
    p.tag == partial_tag(p.signer, &p.over)
}

/// Aggregate the combiner's own share with `foreign` shares into a combined
/// certificate. Charges one computed operation. Invalid or duplicate foreign
/// shares are dropped structurally; the result requires `threshold` distinct
/// valid signers including the combiner.
pub fn combine(
    own: &PartialSignature,
    foreign: &[PartialSignature],
    threshold: usize,
    meter: &mut AuthenticatorMeter,
) -> Result<CombinedSignature, CombineError> {
    let over = own.over;
    if foreign.iter().any(|p| p.over != over) {
        return Err(CombineError::MixedDigests);
    }
    let mut tags: BTreeMap<ReplicaId, Digest> = BTreeMap::new();
    if share_is_valid(own) {
        tags.insert(own.signer, own.tag);
    }
    for p in foreign {
        if share_is_valid(p) {
            tags.insert(p.signer, p.tag);
        }
    }
    if tags.len() < threshold {
        return Err(CombineError::InsufficientPartials { have: tags.len(), need: threshold });
    }
    meter.note_computed();
    let contributor_tags: Vec<Digest> = tags.values().copied().collect();
    Ok(CombinedSignature {
        over,
        contributors: tags.keys().copied().collect(),
        tag: combined_tag(&over, &contributor_tags),
    })
}

/// Check a combined certificate over a digest. Always charges one verified
/// operation. Validity is anchored in the tag: the listed contributors must
/// reproduce it exactly and meet the threshold.
pub fn verify_combined(
    c: &CombinedSignature,
    over: &Digest,
    threshold: usize,
    meter: &mut AuthenticatorMeter,
) -> bool {
    meter.note_verified();
    combined_is_valid(c, over, threshold)
}

/// Structural re-check without metering, for places where a certificate was
/// already paid for once (e.g. deduplicated epoch-change objects).
pub fn combined_is_valid(c: &CombinedSignature, over: &Digest, threshold: usize) -> bool {
    if c.over != *over || c.contributors.len() < threshold {
        return false;
    }
    let tags: Vec<Digest> = c.contributors.iter().map(|r| partial_tag(*r, over)).collect();
    c.tag == combined_tag(over, &tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meter() -> AuthenticatorMeter {
        AuthenticatorMeter::new()
    }

    #[test]
    fn partial_sign_and_verify_meter() {
        let mut m = meter();
        let over = digest(b"d");
        let p = sign_partial(ReplicaId(1), over, &mut m);
        assert!(verify_partial(&p, ReplicaId(1), &over, &mut m));
        assert!(!verify_partial(&p, ReplicaId(2), &over, &mut m));
        let other = digest(b"other");
        assert!(!verify_partial(&p, ReplicaId(1), &other, &mut m));
        let s = m.snapshot();
        assert_eq!(s.computed, 1);
        // Invalid verifications still count.
        assert_eq!(s.verified, 3);
    }

    #[test]
    fn tampered_partial_rejected() {
        let mut m = meter();
        let over = digest(b"d");
        let mut p = sign_partial(ReplicaId(1), over, &mut m);
        p.tag.0[0] ^= 1;
        assert!(!verify_partial(&p, ReplicaId(1), &over, &mut m));
    }

    /// Exhaustive subset behavior at f=1 (threshold 3, n = 4): any set of
    /// distinct valid signers of size >= 3 combines; everything smaller is
    /// refused, and duplicates or invalid shares do not count.
    #[test]
    fn combine_threshold_exhaustive_f1() {
        let over = digest(b"d");
        let shares: Vec<PartialSignature> =
            (0..4).map(|i| unmetered_share(ReplicaId(i), over)).collect();
        for mask in 0u32..16 {
            if mask & 1 == 0 {
                continue; // combiner (replica 0) always contributes its own share
            }
            let foreign: Vec<PartialSignature> = (1..4)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| shares[i as usize].clone())
                .collect();
            let size = mask.count_ones() as usize;
            let mut m = meter();
            let r = combine(&shares[0], &foreign, 3, &mut m);
            if size >= 3 {
                let c = r.expect("quorum should combine");
                assert_eq!(c.contributors.len(), size);
                assert_eq!(m.snapshot().computed, 1);
                let mut m2 = meter();
                assert!(verify_combined(&c, &over, 3, &mut m2));
            } else {
                assert_eq!(r, Err(CombineError::InsufficientPartials { have: size, need: 3 }));
                assert_eq!(m.snapshot().computed, 0, "failed combine must not charge");
            }
        }
    }

    #[test]
    fn combine_drops_duplicates_and_invalid() {
        let over = digest(b"d");
        let own = unmetered_share(ReplicaId(0), over);
        let dup = unmetered_share(ReplicaId(0), over);
        let ok = unmetered_share(ReplicaId(1), over);
        let mut bad = unmetered_share(ReplicaId(2), over);
        bad.tag.0[0] ^= 0xff;
        let mut m = meter();
        let r = combine(&own, &[dup, ok, bad], 3, &mut m);
        assert_eq!(r, Err(CombineError::InsufficientPartials { have: 2, need: 3 }));
    }

    #[test]
    fn combine_rejects_mixed_digests() {
        let over = digest(b"d");
        let own = unmetered_share(ReplicaId(0), over);
        let stray = unmetered_share(ReplicaId(1), digest(b"other"));
        let mut m = meter();
        assert_eq!(combine(&own, &[stray], 2, &mut m), Err(CombineError::MixedDigests));
    }

    /// Mutating the contributor metadata invalidates the certificate: the
    /// tag binds the actual signer set, so metadata alone proves nothing.
    #[test]
    fn forged_contributor_metadata_rejected() {
        let over = digest(b"d");
        let own = unmetered_share(ReplicaId(0), over);
        let foreign: Vec<_> = (1..3).map(|i| unmetered_share(ReplicaId(i), over)).collect();
        let mut m = meter();
        let mut c = combine(&own, &foreign, 3, &mut m).unwrap();
        c.contributors.remove(&ReplicaId(2));
        c.contributors.insert(ReplicaId(3));
        assert!(!verify_combined(&c, &over, 3, &mut m));
        // Tag tampering likewise.
        let mut c2 = combine(&own, &foreign, 3, &mut m).unwrap();
        c2.tag.0[5] ^= 1;
        assert!(!verify_combined(&c2, &over, 3, &mut m));
        // Threshold is enforced at verification too.
        let c3 = combine(&own, &foreign, 3, &mut m).unwrap();
        assert!(!verify_combined(&c3, &over, 4, &mut m));
    }

    #[test]
    fn own_share_equals_metered_share() {
        let over = digest(b"d");
        let mut m = meter();
        assert_eq!(sign_partial(ReplicaId(2), over, &mut m), unmetered_share(ReplicaId(2), over));
    }

    #[test]
    fn meter_contexts_split_epochs_and_classes() {
        let mut m = meter();
        m.set_context(1, MeterClass::Epoch);
        m.note_computed();
        m.note_verified();
        m.set_context(1, MeterClass::Change);
        m.note_verified();
        m.set_context(2, MeterClass::Epoch);
        m.note_computed();
        assert_eq!(m.epoch_ops(1).operation, OpCounts { computed: 1, verified: 1 });
        assert_eq!(m.epoch_ops(1).change, OpCounts { computed: 0, verified: 1 });
        assert_eq!(m.epoch_ops(2).operation, OpCounts { computed: 1, verified: 0 });
        assert_eq!(m.snapshot().total(), 4);
    }
}
