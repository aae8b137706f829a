//! Epoch replacement: collecting signed change objects, deriving the next
//! configuration from a quorum of them, spreading it by reliable broadcast,
//! and entering it under local safety guards.
//!
//! The pipeline per target epoch `T`:
//!
//! 1. Replicas announce `T` with an [`EpochChangeObj`] carrying their best
//!    stable checkpoint per lane plus every prepared/committed slot above it.
//! 2. Whoever the rotation schedule names primary for `T` assembles `2f+1`
//!    valid objects, derives the full configuration from them — a pure
//!    function, so every validator reproduces it bit-for-bit — and publishes
//!    a `NewEpoch` proof plus the configuration itself.
//! 3. The configuration spreads by Bracha-style reliable broadcast (echo,
//!    ready, deliver), which pins all correct replicas to one value per
//!    `(primary, target)` even when the primary equivocates.
//! 4. A replica enters `T` once the proof checks out *and* the exact derived
//!    configuration was delivered, then re-runs the hanging slots it
//!    inherited.
//!
//! Everything here hangs off [`ConfigChain`], the digest-linked set of
//! configurations this replica has delivered or derived. A configuration's
//! slot assignment is reproducible from its wire form alone, so holding the
//! chain is enough to map any peer's evidence from lane-local coordinates to
//! global sequence numbers — no trusted placement data travels in messages.

use super::log::{LeaderLog, Phase, Slot};
use super::{
    echo_domain, ready_domain, ActiveEpoch, Destination, Observation, Outputs, Replica,
    ReplicaConfig, TimerKind,
};
use crate::crypto::{self, MeterClass};
use crate::partition::{
    buckets_per_leader, distribute_seqnums, rotate_buckets, BucketMap, CapacityExceeded,
    SeqAssignment,
};
use crate::rotation::PrimaryHistory;
use crate::types::{
    digest, CheckpointEvidence, ClientId, Digest, EpochChangeMsg, EpochChangeObj,
    EpochConfigWire, Pack, ProtocolMessage, ReplicaId, Request, NULL_CLIENT,
};
use std::collections::{BTreeMap, BTreeSet};

// ---- configuration chain -----------------------------------------------------

#[derive(Debug)]
pub(crate) struct ChainEntry {
    pub wire: EpochConfigWire,
    /// Slot layout reproduced from the wire, cached because evidence
    /// validation looks coordinates up constantly.
    pub slots: SeqAssignment,
}

/// Every configuration this replica knows, keyed by wire identity. Entries
/// link to their predecessors through `prev_conf`, grounding at the first
/// epoch, so chain walks (history, capacity rule, fresh-range arithmetic)
/// never depend on which order things arrived in.
#[derive(Debug, Default)]
pub struct ConfigChain {
    by_id: BTreeMap<Digest, ChainEntry>,
}

impl ConfigChain {
    pub(crate) fn get(&self, id: &Digest) -> Option<&ChainEntry> {
        self.by_id.get(id)
    }

    /// Insert a configuration whose arithmetic has already been checked.
    /// Idempotent; returns whether the entry is new.
    pub(crate) fn insert(&mut self, m: u64, wire: EpochConfigWire) -> bool {
        let id = wire.identity();
        if self.by_id.contains_key(&id) {
            return false;
        }
        let Ok((_, slots)) = reproduce(m, &wire) else {
            debug_assert!(false, "unreproducible wire reached the chain");
            return false;
        };
        self.by_id.insert(id, ChainEntry { wire, slots });
        true
    }
}

/// Rebuild a configuration's bucket map and slot assignment from its wire
/// fields. This is the whole point of the wire format: anyone holding it can
/// check placement claims without trusting the sender.
pub(crate) fn reproduce(
    m: u64,
    wire: &EpochConfigWire,
) -> Result<(BucketMap, SeqAssignment), CapacityExceeded> {
    let shares = buckets_per_leader(&wire.capacities, m);
    let buckets = rotate_buckets(wire.epoch, &shares, m);
    let slots = distribute_seqnums(&wire.capacities, &wire.hanging, wire.fresh_base, wire.epoch)?;
    Ok((buckets, slots))
}

/// Digest pinning an epoch's complete assignment: bucket ownership and every
/// leader's global sequence numbers.
pub(crate) fn assignment_digest(epoch: u64, buckets: &BucketMap, slots: &SeqAssignment) -> Digest {
    let mut buf = Vec::with_capacity(64 + 8 * buckets.assignment.len());
    buf.extend_from_slice(b"assign");
    buf.extend_from_slice(&epoch.to_le_bytes());
    for v in &buckets.assignment {
        buf.extend_from_slice(&v.0.to_le_bytes());
    }
    for (v, lane) in &slots.per_leader {
        buf.extend_from_slice(&v.0.to_le_bytes());
        buf.extend_from_slice(&(lane.globals.len() as u64).to_le_bytes());
        for g in &lane.globals {
            buf.extend_from_slice(&g.to_le_bytes());
        }
    }
    digest(&buf)
}

// ---- change state ------------------------------------------------------------

#[derive(Debug, Default)]
struct RbInstance {
    /// First value seen for this `(primary, target)`; later values drop.
    value: Option<(EpochConfigWire, Digest)>,
    echoes: BTreeSet<ReplicaId>,
    readies: BTreeSet<ReplicaId>,
    /// Set only after the local arithmetic check passed; doubles as the
    /// "this value is locally valid" marker gating delivery.
    sent_echo: bool,
    sent_ready: bool,
    delivered: bool,
    /// The arithmetic check rejected the value outright (not merely "prev
    /// unknown"); never echo or deliver it.
    value_bad: bool,
}

struct PendingNewEpoch {
    proof: Vec<EpochChangeMsg>,
}

struct PendingEntry {
    derived: DerivedEpoch,
}

/// All epoch-change bookkeeping, kept apart from the normal-path state so
/// entry can reset it wholesale.
pub struct ChangeState {
    /// Target this replica has announced; set means "in change": no normal
    /// signing, and no entering anything below it.
    pub announced: Option<u64>,
    /// Consecutive change attempts that timed out since the last entry.
    pub fails: u32,
    pub timer_started: bool,
    /// Change objects by target, then sender. First object per sender wins.
    pub(crate) collected: BTreeMap<u64, BTreeMap<ReplicaId, EpochChangeMsg>>,
    /// Senders whose object passed semantic validation, per target.
    pub(crate) validated: BTreeMap<u64, BTreeSet<ReplicaId>>,
    /// Validation verdicts cached by object identity so an object is never
    /// charged for twice.
    validated_hashes: BTreeSet<Digest>,
    invalid_hashes: BTreeSet<Digest>,
    /// Targets this replica already published a `NewEpoch` for.
    published: BTreeSet<u64>,
    /// Foreign `NewEpoch` claims awaiting validation, by target then primary.
    pending_new_epoch: BTreeMap<u64, BTreeMap<ReplicaId, PendingNewEpoch>>,
    /// Fully validated derivations awaiting the matching broadcast delivery.
    pending_entry: BTreeMap<u64, BTreeMap<ReplicaId, PendingEntry>>,
    rb: BTreeMap<(ReplicaId, u64), RbInstance>,
    rb_index: BTreeMap<Digest, (ReplicaId, u64)>,
    pub(crate) chain: ConfigChain,
}

impl ChangeState {
    pub(crate) fn new() -> Self {
        ChangeState {
            announced: None,
            fails: 0,
            timer_started: false,
            collected: BTreeMap::new(),
            validated: BTreeMap::new(),
            validated_hashes: BTreeSet::new(),
            invalid_hashes: BTreeSet::new(),
            published: BTreeSet::new(),
            pending_new_epoch: BTreeMap::new(),
            pending_entry: BTreeMap::new(),
            rb: BTreeMap::new(),
            rb_index: BTreeMap::new(),
            chain: ConfigChain::default(),
        }
    }
}

// ---- derivation result -------------------------------------------------------

/// A fully derived epoch: the wire form plus everything entry needs. Pure
/// output of [`derive_new_epoch`]; identical on every replica that runs it on
/// the same proof set.
pub struct DerivedEpoch {
    pub wire: EpochConfigWire,
    pub buckets: BucketMap,
    pub slots: SeqAssignment,
    /// Packs to re-run, keyed by global: prepared-but-uncommitted slots keep
    /// their identity, unclaimed coordinates get null fillers.
    pub hanging_packs: BTreeMap<u64, Pack>,
    /// Slots some quorum already committed: finalized at entry, never re-run.
    pub finalized: BTreeMap<u64, Pack>,
    /// Capacities the demand rule produced before the hanging clamp; kept for
    /// metrics.
    pub pre_clamp: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeriveError {
    /// A cited source configuration has not been delivered here yet.
    MissingSource(Digest),
    /// The proof set contradicts its own chain; no configuration derives.
    Inconsistent(&'static str),
}

// ---- genesis -----------------------------------------------------------------

/// The first epoch is not negotiated: every replica derives the same
/// configuration from static parameters and enters it at boot.
pub(crate) fn derive_genesis(cfg: &ReplicaConfig) -> DerivedEpoch {
    let n = cfg.params.n;
    let capacities = vec![cfg.c_min; n];
    let hanging = BTreeMap::new();
    let slots = distribute_seqnums(&capacities, &hanging, 1, 1).expect("empty hanging fits");
    let shares = buckets_per_leader(&capacities, cfg.m);
    let buckets = rotate_buckets(1, &shares, cfg.m);
    let mut wire = EpochConfigWire {
        epoch: 1,
        capacities: capacities.clone(),
        prev_live: 0,
        prev_conf: Digest::ZERO,
        achieved_prev: Vec::new(),
        hanging,
        fresh_base: 1,
        assignment_digest: Digest::ZERO,
    };
    wire.assignment_digest = assignment_digest(1, &buckets, &slots);
    DerivedEpoch {
        wire,
        buckets,
        slots,
        hanging_packs: BTreeMap::new(),
        finalized: BTreeMap::new(),
        pre_clamp: capacities,
    }
}

// ---- change objects ----------------------------------------------------------

/// Snapshot this replica's evidence for an epoch change: per lane the best
/// stable checkpoint (or the genesis placeholder) and every slot above it
/// that reached prepared or committed.
pub(crate) fn build_eco(r: &Replica, target: u64) -> EpochChangeObj {
    let active = r.active.as_ref().expect("change called before boot");
    let mut sc = BTreeMap::new();
    let mut p = BTreeMap::new();
    let mut q = BTreeMap::new();
    for lg in &r.logs {
        let v = lg.leader;
        let ce = lg
            .stable
            .iter()
            .next_back()
            .map(|(_, e)| e.clone())
            .unwrap_or_else(|| CheckpointEvidence::genesis(r.epoch));
        let low = ce.local_sn;
        let mut pv = BTreeMap::new();
        let mut qv = BTreeMap::new();
        for (&l, slot) in lg.slots.range(low + 1..) {
            let req = &slot.pack.requests[0];
            match slot.phase {
                Phase::Committed | Phase::Executed => {
                    qv.insert(
                        l,
                        crate::types::CommittedEvidence {
                            pack_epoch: slot.pack.epoch,
                            pack_digest: slot.digest,
                            client: req.client,
                            r_hash: req.request_hash,
                            opt_ref: slot.pack.opt_ref,
                            prepared: slot
                                .prepared_cert
                                .clone()
                                .expect("committed slot keeps its prepared certificate"),
                            committed: slot
                                .committed_cert
                                .clone()
                                .expect("committed slot keeps its commit certificate"),
                        },
                    );
                }
                Phase::Prepared => {
                    pv.insert(
                        l,
                        crate::types::PreparedEvidence {
                            pack_epoch: slot.pack.epoch,
                            pack_digest: slot.digest,
                            client: req.client,
                            r_hash: req.request_hash,
                            opt_ref: slot.pack.opt_ref,
                            prepared: slot
                                .prepared_cert
                                .clone()
                                .expect("prepared slot keeps its certificate"),
                        },
                    );
                }
                Phase::PrePrepared => {}
            }
        }
        sc.insert(v, ce);
        if !pv.is_empty() {
            p.insert(v, pv);
        }
        if !qv.is_empty() {
            q.insert(v, qv);
        }
    }
    EpochChangeObj {
        epoch: target,
        replica: r.cfg.id,
        source: r.epoch,
        source_conf: active.conf_id,
        sc,
        p,
        q,
    }
}

enum EcoVerdict {
    Good,
    /// The cited source configuration isn't in our chain yet; judge later.
    SourceUnknown,
    Invalid(&'static str),
}

/// Semantic validation of a change object whose envelope (identity hash and
/// sender signature) already checked out. Charges one verification per
/// certificate it inspects, exactly once per object thanks to the caller's
/// verdict cache.
fn validate_eco(
    m: &EpochChangeMsg,
    cfg: &ReplicaConfig,
    chain: &ConfigChain,
    meter: &mut crate::crypto::AuthenticatorMeter,
) -> EcoVerdict {
    let eco = &m.eco;
    let n = cfg.params.n;
    let quorum = cfg.params.quorum();
    if eco.source == 0 || eco.epoch <= eco.source {
        return EcoVerdict::Invalid("target does not follow the source epoch");
    }
    let Some(src) = chain.get(&eco.source_conf) else {
        return EcoVerdict::SourceUnknown;
    };
    if src.wire.epoch != eco.source {
        return EcoVerdict::Invalid("source configuration is for a different epoch");
    }
    if eco.sc.len() != n {
        return EcoVerdict::Invalid("checkpoint vector must cover every lane");
    }
    for (v, ce) in &eco.sc {
        if v.0 >= n as u64 {
            return EcoVerdict::Invalid("checkpoint for an unknown lane");
        }
        if ce.epoch != eco.source {
            return EcoVerdict::Invalid("checkpoint from a different epoch");
        }
        if ce.local_sn == 0 {
            if ce.cert.is_some() || ce.content != Digest::ZERO {
                return EcoVerdict::Invalid("nonempty evidence at height zero");
            }
            continue;
        }
        let cap = src.slots.slots(*v).capacity();
        if ce.local_sn % cfg.k != 0 || ce.local_sn > cap {
            return EcoVerdict::Invalid("checkpoint height off the lattice");
        }
        let Some(cert) = &ce.cert else {
            return EcoVerdict::Invalid("stable checkpoint without a certificate");
        };
        if cert.over != ce.content || cert.contributors.len() < quorum {
            return EcoVerdict::Invalid("checkpoint certificate shape");
        }
        if !crypto::verify_combined(cert, &ce.content, quorum, meter) {
            return EcoVerdict::Invalid("checkpoint certificate");
        }
    }
    for (v, entries) in &eco.p {
        if v.0 >= n as u64 {
            return EcoVerdict::Invalid("prepared evidence for an unknown lane");
        }
        if let Some(qv) = eco.q.get(v) {
            if entries.keys().any(|l| qv.contains_key(l)) {
                return EcoVerdict::Invalid("slot claimed both prepared and committed");
            }
        }
        let low = eco.sc[v].local_sn;
        let lane = src.slots.slots(*v);
        let hi = (low + 2 * cfg.k).min(lane.capacity());
        for (&l, ev) in entries {
            if l <= low || l > hi {
                return EcoVerdict::Invalid("prepared evidence outside the live window");
            }
            let g = lane.global_of(l).expect("window is within capacity");
            if ev.pack_epoch == 0 || ev.pack_epoch > eco.source {
                return EcoVerdict::Invalid("evidence claims a future pack epoch");
            }
            if (ev.r_hash == crate::types::null_request_hash()) != (ev.client == NULL_CLIENT) {
                return EcoVerdict::Invalid("null request fields disagree");
            }
            let ident =
                crate::types::pack_identity_parts(g, ev.pack_epoch, &[ev.r_hash], &ev.opt_ref);
            if ident != ev.pack_digest {
                return EcoVerdict::Invalid("prepared evidence identity preimage");
            }
            if ev.prepared.over != ev.pack_digest || ev.prepared.contributors.len() < quorum {
                return EcoVerdict::Invalid("prepared certificate shape");
            }
            if !crypto::verify_combined(&ev.prepared, &ev.pack_digest, quorum, meter) {
                return EcoVerdict::Invalid("prepared certificate");
            }
        }
    }
    for (v, entries) in &eco.q {
        if v.0 >= n as u64 {
            return EcoVerdict::Invalid("committed evidence for an unknown lane");
        }
        let low = eco.sc[v].local_sn;
        let lane = src.slots.slots(*v);
        let hi = (low + 2 * cfg.k).min(lane.capacity());
        for (&l, ev) in entries {
            if l <= low || l > hi {
                return EcoVerdict::Invalid("committed evidence outside the live window");
            }
            let g = lane.global_of(l).expect("window is within capacity");
            if ev.pack_epoch == 0 || ev.pack_epoch > eco.source {
                return EcoVerdict::Invalid("evidence claims a future pack epoch");
            }
            if (ev.r_hash == crate::types::null_request_hash()) != (ev.client == NULL_CLIENT) {
                return EcoVerdict::Invalid("null request fields disagree");
            }
            let ident =
                crate::types::pack_identity_parts(g, ev.pack_epoch, &[ev.r_hash], &ev.opt_ref);
            if ident != ev.pack_digest {
                return EcoVerdict::Invalid("committed evidence identity preimage");
            }
            if ev.prepared.over != ev.pack_digest || ev.prepared.contributors.len() < quorum {
                return EcoVerdict::Invalid("prepared certificate shape");
            }
            if !crypto::verify_combined(&ev.prepared, &ev.pack_digest, quorum, meter) {
                return EcoVerdict::Invalid("prepared certificate");
            }
            let cd = super::commit_domain(&ev.prepared.tag);
            if ev.committed.over != cd || ev.committed.contributors.len() < quorum {
                return EcoVerdict::Invalid("commit certificate shape");
            }
            if !crypto::verify_combined(&ev.committed, &cd, quorum, meter) {
                return EcoVerdict::Invalid("commit certificate");
            }
        }
    }
    EcoVerdict::Good
}

// ---- derivation --------------------------------------------------------------

#[derive(Clone)]
struct Candidate {
    /// 2 committed, 1 prepared, 0 gap filler. Higher wins a global.
    rank: u8,
    source: u64,
    lane: ReplicaId,
    pack_epoch: u64,
    digest: Digest,
    client: ClientId,
    r_hash: Digest,
    opt_ref: Option<Digest>,
}

fn offer(cands: &mut BTreeMap<u64, Candidate>, g: u64, c: Candidate) {
    match cands.get_mut(&g) {
        None => {
            cands.insert(g, c);
        }
        Some(cur) => {
            // Committed beats prepared beats filler; newer source beats
            // older. Two certificates of equal rank and source disagreeing on
            // identity would mean intersecting quorums signed both — pick
            // deterministically but flag it in debug builds.
            let better = (c.rank, c.source) > (cur.rank, cur.source)
                || ((c.rank, c.source) == (cur.rank, cur.source) && c.digest < cur.digest);
            if (c.rank, c.source) == (cur.rank, cur.source) {
                debug_assert_eq!(c.digest, cur.digest, "conflicting evidence at one global");
            }
            if better {
                *cur = c;
            }
        }
    }
}

/// Derive target epoch `T` from a quorum of validated change objects.
///
/// Deterministic given the proof set and the chain, and every configuration
/// the proof cites is pinned by digest, so all replicas agree on the result
/// without further communication. The fresh range starts exactly at the
/// predecessor's bound, which keeps every epoch's fresh globals disjoint from
/// all of its ancestors'.
pub(crate) fn derive_new_epoch(
    cfg: &ReplicaConfig,
    target: u64,
    proof: &[EpochChangeMsg],
    chain: &ConfigChain,
) -> Result<DerivedEpoch, DeriveError> {
    let n = cfg.params.n;
    let mut resolved: Vec<(&EpochChangeObj, &ChainEntry)> = Vec::with_capacity(proof.len());
    for m in proof {
        let Some(entry) = chain.get(&m.eco.source_conf) else {
            return Err(DeriveError::MissingSource(m.eco.source_conf));
        };
        resolved.push((&m.eco, entry));
    }

    // The predecessor: newest source epoch present, and among objects at that
    // epoch the configuration most of them lived in (ties to the smallest
    // digest). Correct replicas sharing an epoch share its configuration, so
    // the plurality is only ever split by equivocators.
    let s_star = resolved.iter().map(|(e, _)| e.source).max().expect("nonempty proof");
    if s_star >= target {
        return Err(DeriveError::Inconsistent("source at or past the target"));
    }
    let mut votes: BTreeMap<Digest, usize> = BTreeMap::new();
    for (e, _) in &resolved {
        if e.source == s_star {
            *votes.entry(e.source_conf).or_insert(0) += 1;
        }
    }
    let mut prev_conf = Digest::ZERO;
    let mut best = 0usize;
    for (d, c) in &votes {
        if *c > best {
            best = *c;
            prev_conf = *d;
        }
    }
    let prev = chain.get(&prev_conf).expect("resolved above");
    let fresh_base = prev.wire.global_bound();

    // Checkpoint coverage pooled across the proof: per cited configuration
    // and lane, the highest stable height anyone proved. Everything a pooled
    // checkpoint covers is settled history and needs no re-run.
    let mut pooled: BTreeMap<(Digest, ReplicaId), u64> = BTreeMap::new();
    for (e, _) in &resolved {
        for (v, ce) in &e.sc {
            let slot = pooled.entry((e.source_conf, *v)).or_insert(0);
            *slot = (*slot).max(ce.local_sn);
        }
    }
    let mut settled: BTreeSet<u64> = BTreeSet::new();
    for ((conf, v), low) in &pooled {
        let entry = chain.get(conf).expect("pooled from resolved objects");
        let lane = entry.slots.slots(*v);
        for l in 1..=*low {
            settled.insert(lane.global_of(l).expect("checkpoint within capacity"));
        }
    }

    // Best evidence per global.
    let mut cands: BTreeMap<u64, Candidate> = BTreeMap::new();
    for (e, entry) in &resolved {
        for (v, entries) in &e.q {
            let lane = entry.slots.slots(*v);
            for (&l, ev) in entries {
                let g = lane.global_of(l).expect("validated placement");
                if settled.contains(&g) {
                    continue;
                }
                offer(
                    &mut cands,
                    g,
                    Candidate {
                        rank: 2,
                        source: e.source,
                        lane: *v,
                        pack_epoch: ev.pack_epoch,
                        digest: ev.pack_digest,
                        client: ev.client,
                        r_hash: ev.r_hash,
                        opt_ref: ev.opt_ref,
                    },
                );
            }
        }
        for (v, entries) in &e.p {
            let lane = entry.slots.slots(*v);
            for (&l, ev) in entries {
                let g = lane.global_of(l).expect("validated placement");
                if settled.contains(&g) {
                    continue;
                }
                offer(
                    &mut cands,
                    g,
                    Candidate {
                        rank: 1,
                        source: e.source,
                        lane: *v,
                        pack_epoch: ev.pack_epoch,
                        digest: ev.pack_digest,
                        client: ev.client,
                        r_hash: ev.r_hash,
                        opt_ref: ev.opt_ref,
                    },
                );
            }
        }
    }

    // Coordinates of the predecessor nobody proved anything for become null
    // fillers, so its sequence space closes without holes. Only the
    // predecessor's live window can need this: older epochs' coordinates were
    // closed the same way when their successors were derived.
    for v in cfg.params.replicas() {
        let lane = prev.slots.slots(v);
        let low = pooled.get(&(prev_conf, v)).copied().unwrap_or(0);
        let hi = (low + 2 * cfg.k).min(lane.capacity());
        for l in low + 1..=hi {
            let g = lane.global_of(l).expect("window within capacity");
            if settled.contains(&g) || cands.contains_key(&g) {
                continue;
            }
            cands.insert(
                g,
                Candidate {
                    rank: 0,
                    source: s_star,
                    lane: v,
                    pack_epoch: target,
                    digest: Digest::ZERO,
                    client: NULL_CLIENT,
                    r_hash: crate::types::null_request_hash(),
                    opt_ref: None,
                },
            );
        }
    }

    // Every carried-over global must sit below the fresh range. Evidence
    // beyond it means the proof mixes incompatible branches; no configuration
    // derives from it.
    if let Some((&g, _)) = cands.iter().next_back() {
        if g >= fresh_base {
            return Err(DeriveError::Inconsistent("evidence beyond the fresh range"));
        }
    }

    // Split winners: committed slots finalize at entry, the rest re-run.
    let mut finalized: BTreeMap<u64, Pack> = BTreeMap::new();
    let mut hanging_packs: BTreeMap<u64, Pack> = BTreeMap::new();
    let mut lane_hanging: BTreeMap<ReplicaId, Vec<u64>> = BTreeMap::new();
    for (&g, c) in &cands {
        let req = if c.rank == 0 {
            Request::null()
        } else {
            Request {
                client: c.client,
                operation: Vec::new(),
                timestamp: 0,
                request_hash: c.r_hash,
            }
        };
        let pack = Pack::new(g, c.pack_epoch, vec![req], c.opt_ref);
        if c.rank >= 1 {
            debug_assert_eq!(pack.identity(), c.digest, "husk must reproduce the identity");
        }
        if c.rank == 2 {
            finalized.insert(g, pack);
        } else {
            lane_hanging.entry(c.lane).or_default().push(g);
            hanging_packs.insert(g, pack);
        }
    }
    for globals in lane_hanging.values_mut() {
        globals.sort_unstable();
    }

    // The predecessor's recorded performance: checkpoint coverage plus the
    // distinct committed slots proven above it, per lane.
    let mut achieved_prev = vec![0u64; n];
    for v in cfg.params.replicas() {
        let low = pooled.get(&(prev_conf, v)).copied().unwrap_or(0);
        let mut extra: BTreeSet<u64> = BTreeSet::new();
        for (e, _) in &resolved {
            if e.source_conf != prev_conf {
                continue;
            }
            if let Some(qv) = e.q.get(&v) {
                for &l in qv.keys() {
                    if l > low {
                        extra.insert(l);
                    }
                }
            }
        }
        achieved_prev[v.0 as usize] = low + extra.len() as u64;
    }

    // Capacity rule: double on full use, otherwise the recent peak with a
    // floor — then clamp so inherited slots always fit.
    let hist = capacity_history(chain, prev, &achieved_prev, cfg.params.f);
    let mut capacities = vec![0u64; n];
    let mut pre_clamp = vec![0u64; n];
    for v in 0..n {
        let achieved = achieved_prev[v];
        let rule = if achieved == prev.wire.capacities[v] {
            2 * achieved
        } else {
            let peak = hist.iter().filter_map(|row| row.get(v).copied()).max().unwrap_or(0);
            peak.max(cfg.c_min)
        };
        pre_clamp[v] = rule;
        let hang = lane_hanging.get(&ReplicaId(v as u64)).map_or(0, |h| h.len() as u64);
        capacities[v] = rule.max(hang);
    }

    let shares = buckets_per_leader(&capacities, cfg.m);
    let buckets = rotate_buckets(target, &shares, cfg.m);
    let slots = distribute_seqnums(&capacities, &lane_hanging, fresh_base, target)
        .map_err(|_| DeriveError::Inconsistent("inherited slots exceed capacity"))?;
    let mut wire = EpochConfigWire {
        epoch: target,
        capacities,
        prev_live: s_star,
        prev_conf,
        achieved_prev,
        hanging: lane_hanging,
        fresh_base,
        assignment_digest: Digest::ZERO,
    };
    wire.assignment_digest = assignment_digest(target, &buckets, &slots);
    Ok(DerivedEpoch { wire, buckets, slots, hanging_packs, finalized, pre_clamp })
}

/// Per-lane committed counts of the last `f+1` epochs that actually ran,
/// newest first, walked along the configuration chain.
fn capacity_history(
    chain: &ConfigChain,
    prev: &ChainEntry,
    achieved_now: &[u64],
    f: usize,
) -> Vec<Vec<u64>> {
    let mut rows = vec![achieved_now.to_vec()];
    let mut cur = prev;
    while rows.len() < f + 1 && cur.wire.prev_live > 0 {
        rows.push(cur.wire.achieved_prev.clone());
        match chain.get(&cur.wire.prev_conf) {
            Some(e) => cur = e,
            None => break,
        }
    }
    rows
}

/// Who must lead the change to `wire.epoch`, by replaying the rotation
/// schedule over the performance record embedded in the configuration chain.
/// Epochs absent from the chain were change attempts that never went live;
/// they consumed their primary's turn with zero committed work.
pub(crate) fn canonical_history(
    cfg: &ReplicaConfig,
    wire: &EpochConfigWire,
    chain: &ConfigChain,
) -> Result<ReplicaId, DeriveError> {
    let mut perf: BTreeMap<u64, u64> = BTreeMap::new();
    let mut cur = wire;
    while cur.prev_live > 0 {
        perf.insert(cur.prev_live, cur.committed_prev());
        match chain.get(&cur.prev_conf) {
            Some(e) => cur = &e.wire,
            None => return Err(DeriveError::MissingSource(cur.prev_conf)),
        }
    }
    let mut h = PrimaryHistory::new(cfg.params, cfg.g);
    for e in 1..wire.epoch {
        let (p, _) = h.next_primary(e);
        let committed = perf.get(&e).copied().unwrap_or(0);
        h.record_epoch(e, p, committed)
            .map_err(|_| DeriveError::Inconsistent("rotation replay"))?;
    }
    Ok(h.next_primary(wire.epoch).0)
}

pub(crate) fn new_epoch_hash(target: u64, primary: ReplicaId, proof: &[EpochChangeMsg]) -> Digest {
    let mut buf = Vec::with_capacity(32 + 32 * proof.len());
    buf.extend_from_slice(b"new-epoch");
    buf.extend_from_slice(&target.to_le_bytes());
    buf.extend_from_slice(&primary.0.to_le_bytes());
    for m in proof {
        buf.extend_from_slice(&m.e_hash.0);
    }
    digest(&buf)
}

// ---- message handlers --------------------------------------------------------

pub(crate) fn on_epoch_change(r: &mut Replica, msg: EpochChangeMsg, out: &mut Outputs) {
    let target = msg.eco.epoch;
    let sender = msg.eco.replica;
    let n = r.cfg.params.n as u64;
    if sender.0 >= n || sender == r.cfg.id || target <= r.epoch {
        return;
    }
    if r.change.collected.get(&target).is_some_and(|m| m.contains_key(&sender)) {
        return;
    }
    if msg.e_hash != msg.eco.identity()
        || msg.ec_cert.signer != sender
        || msg.ec_cert.over != msg.e_hash
    {
        return;
    }
    r.meter.set_context(r.epoch, MeterClass::Change);
    if !crypto::verify_partial(&msg.ec_cert, sender, &msg.e_hash, &mut r.meter) {
        return;
    }
    r.change.collected.entry(target).or_default().insert(sender, msg);

    // Join a change already in motion: f+1 distinct replicas calling past our
    // floor cannot all be faulty, so at least one correct replica saw a
    // reason. Adopt the smallest such target.
    let floor = r.epoch.max(r.change.announced.unwrap_or(0));
    let mut beyond: BTreeSet<ReplicaId> = BTreeSet::new();
    let mut adopt = None;
    for (&t, m) in r.change.collected.range(floor + 1..) {
        if adopt.is_none() {
            adopt = Some(t);
        }
        beyond.extend(m.keys().copied());
    }
    if beyond.len() > r.cfg.params.f {
        if let Some(t) = adopt {
            r.call_change(t, out);
        }
    }
    maybe_start_change_timer(r, out);
    retry_change_work(r, out);
}

/// Validate collected change objects for `target` that have no cached
/// verdict yet.
fn validate_collected(r: &mut Replica, target: u64, out: &mut Outputs) {
    let mut verdicts: Vec<(ReplicaId, Digest, EcoVerdict)> = Vec::new();
    {
        let Some(coll) = r.change.collected.get(&target) else { return };
        let done = r.change.validated.get(&target);
        for (s, m) in coll {
            if done.is_some_and(|d| d.contains(s)) || r.change.invalid_hashes.contains(&m.e_hash)
            {
                continue;
            }
            if r.change.validated_hashes.contains(&m.e_hash) {
                verdicts.push((*s, m.e_hash, EcoVerdict::Good));
                continue;
            }
            let v = validate_eco(m, &r.cfg, &r.change.chain, &mut r.meter);
            verdicts.push((*s, m.e_hash, v));
        }
    }
    for (s, h, v) in verdicts {
        match v {
            EcoVerdict::Good => {
                r.change.validated.entry(target).or_default().insert(s);
                r.change.validated_hashes.insert(h);
            }
            EcoVerdict::SourceUnknown => {}
            EcoVerdict::Invalid(why) => {
                r.change.invalid_hashes.insert(h);
                if let Some(coll) = r.change.collected.get_mut(&target) {
                    coll.remove(&s);
                }
                out.notes.push(format!("change object from {s:?} for {target} rejected: {why}"));
            }
        }
    }
}

/// If the rotation schedule names us primary for `target` and a quorum of
/// valid objects is in, derive and publish. A proof set that mixes branches
/// can fail to derive; one-out rotations of the member list give byzantine
/// objects at most one veto each.
fn try_primary_assemble(r: &mut Replica, target: u64, out: &mut Outputs) {
    if target <= r.epoch || r.change.published.contains(&target) {
        return;
    }
    validate_collected(r, target, out);
    let quorum = r.cfg.params.quorum();
    let members: Vec<EpochChangeMsg> = {
        let Some(valid) = r.change.validated.get(&target) else { return };
        let Some(coll) = r.change.collected.get(&target) else { return };
        valid.iter().filter_map(|s| coll.get(s).cloned()).collect()
    };
    if members.len() < quorum {
        return;
    }
    let mut plans: Vec<Vec<EpochChangeMsg>> = Vec::new();
    plans.push(members.iter().take(quorum).cloned().collect());
    if members.len() > quorum {
        for skip in 0..quorum {
            plans.push(
                members
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != skip)
                    .map(|(_, m)| m.clone())
                    .take(quorum)
                    .collect(),
            );
        }
    }
    for plan in plans {
        match derive_new_epoch(&r.cfg, target, &plan, &r.change.chain) {
            Ok(derived) => {
                if let Ok(p) = canonical_history(&r.cfg, &derived.wire, &r.change.chain) {
                    if p == r.cfg.id {
                        publish_new_epoch(r, target, plan, derived, out);
                    }
                }
                return;
            }
            // Sources are resolved before validation succeeds, so only a
            // contradictory mix can fail; try the next rotation.
            Err(DeriveError::MissingSource(_)) => return,
            Err(DeriveError::Inconsistent(_)) => continue,
        }
    }
}

fn publish_new_epoch(
    r: &mut Replica,
    target: u64,
    plan: Vec<EpochChangeMsg>,
    derived: DerivedEpoch,
    out: &mut Outputs,
) {
    r.change.published.insert(target);
    r.meter.set_context(r.epoch, MeterClass::Change);
    let e_hash = new_epoch_hash(target, r.cfg.id, &plan);
    let ec_cert = crypto::sign_partial(r.cfg.id, e_hash, &mut r.meter);
    let eco = plan
        .iter()
        .find(|m| m.eco.replica == r.cfg.id)
        .unwrap_or(&plan[0])
        .eco
        .clone();
    out.msgs.push((
        Destination::AllReplicas,
        ProtocolMessage::NewEpoch { primary: r.cfg.id, eco, ec_cert, e_hash, eco_proof: plan },
    ));
    let config = derived.wire.clone();
    let conf_hash = config.identity();
    let sig = crypto::sign_partial(r.cfg.id, conf_hash, &mut r.meter);
    out.msgs.push((
        Destination::Replica(r.cfg.id),
        // Placeholder destination rewritten below; broadcast carries the value.
        ProtocolMessage::NewEpochConf { primary: r.cfg.id, config: config.clone(), conf_hash, sig },
    ));
    // Fix the destination: the configuration goes to everyone.
    if let Some(last) = out.msgs.last_mut() {
        last.0 = Destination::AllReplicas;
    }
    r.change
        .pending_entry
        .entry(target)
        .or_default()
        .insert(r.cfg.id, PendingEntry { derived });
    rb_receive_value(r, r.cfg.id, config, conf_hash, out);
    try_enter(r, target, out);
}

pub(crate) fn on_new_epoch(
    r: &mut Replica,
    primary: ReplicaId,
    eco: EpochChangeObj,
    ec_cert: crate::crypto::PartialSignature,
    e_hash: Digest,
    eco_proof: Vec<EpochChangeMsg>,
    out: &mut Outputs,
) {
    let n = r.cfg.params.n as u64;
    let quorum = r.cfg.params.quorum();
    let target = eco.epoch;
    if primary.0 >= n || primary == r.cfg.id || target <= r.epoch {
        return;
    }
    if let Some(a) = r.change.announced {
        // Entry below our announcement is barred anyway; don't spend
        // verifications on it.
        if target < a {
            return;
        }
    }
    if r.change
        .pending_new_epoch
        .get(&target)
        .is_some_and(|m| m.contains_key(&primary))
    {
        return;
    }
    if eco_proof.len() != quorum {
        return;
    }
    let mut senders = BTreeSet::new();
    for m in &eco_proof {
        if m.eco.epoch != target || !senders.insert(m.eco.replica) {
            return;
        }
    }
    if new_epoch_hash(target, primary, &eco_proof) != e_hash
        || ec_cert.signer != primary
        || ec_cert.over != e_hash
    {
        return;
    }
    r.meter.set_context(r.epoch, MeterClass::Change);
    if !crypto::verify_partial(&ec_cert, primary, &e_hash, &mut r.meter) {
        return;
    }
    r.change
        .pending_new_epoch
        .entry(target)
        .or_default()
        .insert(primary, PendingNewEpoch { proof: eco_proof });
    try_resolve_new_epoch(r, target, primary, out);
}

/// Work a pending foreign `NewEpoch` claim as far as current knowledge
/// allows: validate its proof members, re-derive, check the claimed primary
/// against the canonical schedule, then queue the entry.
fn try_resolve_new_epoch(r: &mut Replica, target: u64, primary: ReplicaId, out: &mut Outputs) {
    if target <= r.epoch {
        return;
    }
    let Some(pending) = r.change.pending_new_epoch.get(&target).and_then(|m| m.get(&primary))
    else {
        return;
    };
    let proof = pending.proof.clone();
    let reject = |r: &mut Replica, why: &str, out: &mut Outputs| {
        if let Some(m) = r.change.pending_new_epoch.get_mut(&target) {
            m.remove(&primary);
        }
        out.notes.push(format!("new-epoch {target} from {primary:?} rejected: {why}"));
    };
    for m in &proof {
        if r.change.invalid_hashes.contains(&m.e_hash) {
            reject(r, "proof cites a rejected change object", out);
            return;
        }
        if m.e_hash != m.eco.identity()
            || m.ec_cert.signer != m.eco.replica
            || m.ec_cert.over != m.e_hash
        {
            reject(r, "proof member envelope", out);
            return;
        }
        if r.change.validated_hashes.contains(&m.e_hash) {
            continue;
        }
        // Skip the share check when this exact message already passed it on
        // direct receipt.
        let envelope_done = r
            .change
            .collected
            .get(&target)
            .and_then(|c| c.get(&m.eco.replica))
            .is_some_and(|have| have.e_hash == m.e_hash);
        r.meter.set_context(r.epoch, MeterClass::Change);
        if !envelope_done
            && !crypto::verify_partial(&m.ec_cert, m.eco.replica, &m.e_hash, &mut r.meter)
        {
            reject(r, "proof member signature", out);
            return;
        }
        match validate_eco(m, &r.cfg, &r.change.chain, &mut r.meter) {
            EcoVerdict::Good => {
                r.change.validated_hashes.insert(m.e_hash);
                r.change.validated.entry(target).or_default().insert(m.eco.replica);
                // A proof member is as good as a directly received object.
                r.change
                    .collected
                    .entry(target)
                    .or_default()
                    .entry(m.eco.replica)
                    .or_insert_with(|| m.clone());
            }
            EcoVerdict::SourceUnknown => return,
            EcoVerdict::Invalid(why) => {
                r.change.invalid_hashes.insert(m.e_hash);
                reject(r, why, out);
                return;
            }
        }
    }
    let derived = match derive_new_epoch(&r.cfg, target, &proof, &r.change.chain) {
        Ok(d) => d,
        Err(DeriveError::MissingSource(_)) => return,
        Err(DeriveError::Inconsistent(why)) => {
            reject(r, why, out);
            return;
        }
    };
    match canonical_history(&r.cfg, &derived.wire, &r.change.chain) {
        Ok(p) if p == primary => {}
        Ok(_) => {
            reject(r, "sender is not this epoch's scheduled primary", out);
            return;
        }
        Err(DeriveError::MissingSource(_)) => return,
        Err(DeriveError::Inconsistent(why)) => {
            reject(r, why, out);
            return;
        }
    }
    r.change
        .pending_entry
        .entry(target)
        .or_default()
        .insert(primary, PendingEntry { derived });
    try_enter(r, target, out);
}

// ---- reliable broadcast of configurations ------------------------------------

enum ConfCheck {
    Valid,
    PrevUnknown,
    Bad(&'static str),
}

/// Chain-arithmetic checks on a broadcast configuration. These run at echo
/// time, before any quorum forms, so a fabricated configuration — wrong
/// fresh range, capacities under the floor, overlapping inherited slots —
/// never gathers correct echoes at all.
fn conf_arithmetic(cfg: &ReplicaConfig, chain: &ConfigChain, wire: &EpochConfigWire) -> ConfCheck {
    let n = cfg.params.n;
    if wire.epoch < 2 {
        return ConfCheck::Bad("first epoch is never broadcast");
    }
    if wire.capacities.len() != n || wire.achieved_prev.len() != n {
        return ConfCheck::Bad("vector lengths");
    }
    if wire.capacities.iter().any(|&c| c < cfg.c_min) {
        return ConfCheck::Bad("capacity under the floor");
    }
    if wire.prev_live == 0 || wire.prev_live >= wire.epoch {
        return ConfCheck::Bad("predecessor epoch out of order");
    }
    let mut seen = BTreeSet::new();
    for (v, globals) in &wire.hanging {
        if v.0 >= n as u64 {
            return ConfCheck::Bad("inherited slots for an unknown lane");
        }
        if globals.len() as u64 > wire.capacities[v.0 as usize] {
            return ConfCheck::Bad("inherited slots exceed capacity");
        }
        if !globals.windows(2).all(|w| w[0] < w[1]) {
            return ConfCheck::Bad("inherited slots out of order");
        }
        for &g in globals {
            if g >= wire.fresh_base {
                return ConfCheck::Bad("inherited slot inside the fresh range");
            }
            if !seen.insert(g) {
                return ConfCheck::Bad("inherited slot assigned twice");
            }
        }
    }
    let Some(prev) = chain.get(&wire.prev_conf) else {
        return ConfCheck::PrevUnknown;
    };
    if prev.wire.epoch != wire.prev_live {
        return ConfCheck::Bad("predecessor identity mismatch");
    }
    if wire.fresh_base != prev.wire.global_bound() {
        return ConfCheck::Bad("fresh range does not abut the predecessor");
    }
    match reproduce(cfg.m, wire) {
        Ok((buckets, slots)) => {
            if assignment_digest(wire.epoch, &buckets, &slots) != wire.assignment_digest {
                return ConfCheck::Bad("assignment digest mismatch");
            }
            ConfCheck::Valid
        }
        Err(_) => ConfCheck::Bad("unassignable"),
    }
}

/// Record the first value for an RB instance and start participating.
fn rb_receive_value(
    r: &mut Replica,
    primary: ReplicaId,
    config: EpochConfigWire,
    conf_hash: Digest,
    out: &mut Outputs,
) -> bool {
    let target = config.epoch;
    let key = (primary, target);
    let inst = r.change.rb.entry(key).or_default();
    if inst.value.is_some() {
        return false;
    }
    inst.value = Some((config, conf_hash));
    r.change.rb_index.insert(conf_hash, key);
    for m in r.waiters_take(&conf_hash) {
        r.push_replay(m);
    }
    try_echo(r, key, out);
    true
}

fn try_echo(r: &mut Replica, key: (ReplicaId, u64), out: &mut Outputs) {
    let verdict = {
        let Some(inst) = r.change.rb.get(&key) else { return };
        if inst.sent_echo || inst.value_bad {
            return;
        }
        let Some((config, _)) = &inst.value else { return };
        conf_arithmetic(&r.cfg, &r.change.chain, config)
    };
    match verdict {
        ConfCheck::Valid => {
            let conf_hash = r.change.rb[&key].value.as_ref().unwrap().1;
            r.meter.set_context(r.epoch, MeterClass::Change);
            let sig = crypto::sign_partial(r.cfg.id, echo_domain(&conf_hash), &mut r.meter);
            let inst = r.change.rb.get_mut(&key).unwrap();
            inst.sent_echo = true;
            inst.echoes.insert(r.cfg.id);
            out.msgs.push((
                Destination::AllReplicas,
                ProtocolMessage::RbEcho { replica: r.cfg.id, conf_hash, sig },
            ));
            rb_progress(r, key, out);
        }
        ConfCheck::PrevUnknown => {}
        ConfCheck::Bad(why) => {
            let inst = r.change.rb.get_mut(&key).unwrap();
            inst.value_bad = true;
            out.notes.push(format!(
                "configuration for epoch {} from {:?} rejected: {why}",
                key.1, key.0
            ));
        }
    }
}

/// Advance the ready/deliver ladder for one instance.
fn rb_progress(r: &mut Replica, key: (ReplicaId, u64), out: &mut Outputs) {
    let quorum = r.cfg.params.quorum();
    let f = r.cfg.params.f;
    let ready_now = {
        let Some(inst) = r.change.rb.get(&key) else { return };
        !inst.sent_ready
            && inst.value.is_some()
            && (inst.echoes.len() >= quorum || inst.readies.len() > f)
    };
    if ready_now {
        let conf_hash = r.change.rb[&key].value.as_ref().unwrap().1;
        r.meter.set_context(r.epoch, MeterClass::Change);
        let sig = crypto::sign_partial(r.cfg.id, ready_domain(&conf_hash), &mut r.meter);
        let inst = r.change.rb.get_mut(&key).unwrap();
        inst.sent_ready = true;
        inst.readies.insert(r.cfg.id);
        out.msgs.push((
            Destination::AllReplicas,
            ProtocolMessage::RbReady { replica: r.cfg.id, conf_hash, sig },
        ));
    }
    let deliver_now = {
        let Some(inst) = r.change.rb.get(&key) else { return };
        // `sent_echo` records that our own arithmetic accepted the value; a
        // ready quorum alone must not push an unvalidated configuration into
        // the chain while our predecessor knowledge lags.
        !inst.delivered && inst.sent_echo && inst.readies.len() >= quorum
    };
    if deliver_now {
        let config = {
            let inst = r.change.rb.get_mut(&key).unwrap();
            inst.delivered = true;
            inst.value.as_ref().unwrap().0.clone()
        };
        r.change.chain.insert(r.cfg.m, config);
        retry_change_work(r, out);
    }
}

pub(crate) fn on_new_epoch_conf(
    r: &mut Replica,
    primary: ReplicaId,
    config: EpochConfigWire,
    conf_hash: Digest,
    sig: crate::crypto::PartialSignature,
    out: &mut Outputs,
) {
    let n = r.cfg.params.n as u64;
    if primary.0 >= n || primary == r.cfg.id {
        return;
    }
    if config.epoch <= r.epoch {
        return;
    }
    if conf_hash != config.identity() || sig.signer != primary || sig.over != conf_hash {
        return;
    }
    if r.change
        .rb
        .get(&(primary, config.epoch))
        .is_some_and(|i| i.value.is_some())
    {
        return;
    }
    r.meter.set_context(r.epoch, MeterClass::Change);
    if !crypto::verify_partial(&sig, primary, &conf_hash, &mut r.meter) {
        return;
    }
    if rb_receive_value(r, primary, config.clone(), conf_hash, out) {
        // Flood the value once so every replica can match later echoes and
        // readies to it even if the primary stops here.
        out.msgs.push((
            Destination::AllReplicas,
            ProtocolMessage::NewEpochConf { primary, config, conf_hash, sig },
        ));
    }
}

pub(crate) fn on_rb_echo(
    r: &mut Replica,
    replica: ReplicaId,
    conf_hash: Digest,
    sig: crate::crypto::PartialSignature,
    out: &mut Outputs,
) {
    let n = r.cfg.params.n as u64;
    if replica.0 >= n || replica == r.cfg.id {
        return;
    }
    let Some(&key) = r.change.rb_index.get(&conf_hash) else {
        r.waiters_put(
            conf_hash,
            ProtocolMessage::RbEcho { replica, conf_hash, sig },
        );
        return;
    };
    let quorum = r.cfg.params.quorum();
    {
        let Some(inst) = r.change.rb.get(&key) else { return };
        if inst.delivered || inst.echoes.contains(&replica) || inst.echoes.len() >= quorum {
            return;
        }
    }
    if sig.signer != replica || sig.over != echo_domain(&conf_hash) {
        return;
    }
    r.meter.set_context(r.epoch, MeterClass::Change);
    if !crypto::verify_partial(&sig, replica, &echo_domain(&conf_hash), &mut r.meter) {
        return;
    }
    r.change.rb.get_mut(&key).unwrap().echoes.insert(replica);
    rb_progress(r, key, out);
}

pub(crate) fn on_rb_ready(
    r: &mut Replica,
    replica: ReplicaId,
    conf_hash: Digest,
    sig: crate::crypto::PartialSignature,
    out: &mut Outputs,
) {
    let n = r.cfg.params.n as u64;
    if replica.0 >= n || replica == r.cfg.id {
        return;
    }
    let Some(&key) = r.change.rb_index.get(&conf_hash) else {
        r.waiters_put(
            conf_hash,
            ProtocolMessage::RbReady { replica, conf_hash, sig },
        );
        return;
    };
    let quorum = r.cfg.params.quorum();
    {
        let Some(inst) = r.change.rb.get(&key) else { return };
        if inst.delivered || inst.readies.contains(&replica) || inst.readies.len() >= quorum {
            return;
        }
    }
    if sig.signer != replica || sig.over != ready_domain(&conf_hash) {
        return;
    }
    r.meter.set_context(r.epoch, MeterClass::Change);
    if !crypto::verify_partial(&sig, replica, &ready_domain(&conf_hash), &mut r.meter) {
        return;
    }
    r.change.rb.get_mut(&key).unwrap().readies.insert(replica);
    rb_progress(r, key, out);
}

// ---- timers and retries ------------------------------------------------------

/// Start the change-completion timer once a quorum is visibly pursuing a
/// target at or past ours. Repeated failures back the duration off
/// exponentially beyond `f` attempts — the first `f` may simply have had
/// faulty primaries.
pub(crate) fn maybe_start_change_timer(r: &mut Replica, out: &mut Outputs) {
    if r.change.timer_started {
        return;
    }
    let Some(a) = r.change.announced else { return };
    let mut senders: BTreeSet<ReplicaId> = BTreeSet::new();
    for (_, m) in r.change.collected.range(a..) {
        senders.extend(m.keys().copied());
    }
    if senders.len() < r.cfg.params.quorum() {
        return;
    }
    r.change.timer_started = true;
    let shift = r.change.fails.saturating_sub(r.cfg.params.f as u32).min(24);
    let delay = r.cfg.change_timer.saturating_mul(1u64 << shift);
    r.set_timer(TimerKind::EpochChange, delay, out);
}

/// Re-run every change-path step that may have been waiting on new
/// knowledge: chain growth, fresh validations, broadcast deliveries.
pub(crate) fn retry_change_work(r: &mut Replica, out: &mut Outputs) {
    let keys: Vec<(ReplicaId, u64)> = r.change.rb.keys().copied().collect();
    for key in keys {
        try_echo(r, key, out);
        rb_progress(r, key, out);
    }
    let targets: Vec<u64> = r.change.collected.range(r.epoch + 1..).map(|(t, _)| *t).collect();
    for t in targets {
        try_primary_assemble(r, t, out);
    }
    let claims: Vec<(u64, ReplicaId)> = r
        .change
        .pending_new_epoch
        .iter()
        .flat_map(|(t, m)| m.keys().map(move |p| (*t, *p)))
        .collect();
    for (t, p) in claims {
        if t > r.epoch {
            try_resolve_new_epoch(r, t, p, out);
        }
    }
    let entries: Vec<u64> = r.change.pending_entry.keys().copied().collect();
    for t in entries {
        if t > r.epoch {
            try_enter(r, t, out);
        }
    }
}

/// Enter `target` if some fully validated derivation for it matches a
/// delivered broadcast value.
fn try_enter(r: &mut Replica, target: u64, out: &mut Outputs) {
    if target <= r.epoch {
        return;
    }
    let matched = {
        let Some(entries) = r.change.pending_entry.get(&target) else { return };
        let mut found = None;
        for (p, pe) in entries {
            if target == 1 {
                found = Some(*p);
                break;
            }
            let cid = pe.derived.wire.identity();
            let ok = r
                .change
                .rb
                .get(&(*p, target))
                .is_some_and(|i| i.delivered && i.value.as_ref().is_some_and(|(_, h)| *h == cid));
            if ok {
                found = Some(*p);
                break;
            }
        }
        found
    };
    let Some(primary) = matched else { return };
    let pe = r
        .change
        .pending_entry
        .get_mut(&target)
        .and_then(|m| m.remove(&primary))
        .expect("matched above");
    enter_epoch(r, target, pe.derived, out);
}

// ---- entry -------------------------------------------------------------------

/// Install a derived epoch and resume normal operation in it.
///
/// Two refusal guards run first. The announcement guard: having told the
/// world we are changing toward `A`, entering anything below `A` could have
/// us signing in an epoch the rest of the quorum already abandoned. The
/// lineage guard: a configuration whose fresh range starts at or below
/// something we already executed descends from a branch that missed part of
/// our history — entering it could mint a second identity for an executed
/// global. Refusals are observable; the run harness treats unexpected ones
/// as audit failures.
pub(crate) fn enter_epoch(r: &mut Replica, target: u64, derived: DerivedEpoch, out: &mut Outputs) {
    if target <= r.epoch {
        return;
    }
    if let Some(a) = r.change.announced {
        if target < a {
            out.observations.push(Observation::Refused {
                target,
                reason: format!("announced change toward {a}"),
            });
            return;
        }
    }
    if let Some((&top, _)) = r.executed.iter().next_back() {
        if top >= derived.wire.fresh_base {
            out.observations.push(Observation::Refused {
                target,
                reason: format!(
                    "fresh range starts at {} but {top} is already executed",
                    derived.wire.fresh_base
                ),
            });
            return;
        }
    }
    for (g, pack) in derived.finalized.iter().chain(derived.hanging_packs.iter()) {
        if let Some(&(prior, _)) = r.executed.get(g) {
            if prior != pack.identity() {
                debug_assert!(false, "inherited identity conflicts with executed {g}");
                out.observations.push(Observation::Refused {
                    target,
                    reason: format!("inherited slot {g} contradicts executed history"),
                });
                return;
            }
        }
    }

    r.epoch = target;
    let conf_id = derived.wire.identity();
    r.change.chain.insert(r.cfg.m, derived.wire.clone());
    r.active = Some(ActiveEpoch {
        epoch: target,
        wire: derived.wire.clone(),
        conf_id,
        buckets: derived.buckets.clone(),
        slots: derived.slots.clone(),
    });
    r.logs = r
        .cfg
        .params
        .replicas()
        .map(|v| LeaderLog::new(v, derived.slots.slots(v).capacity(), r.cfg.k))
        .collect();
    r.by_digest = BTreeMap::new();
    r.proposed.clear();
    r.progress_armed = false;
    r.progress_expired.clear();

    r.change.announced = None;
    r.change.fails = 0;
    r.change.timer_started = false;
    r.cancel_timer(TimerKind::EpochChange);
    r.change.collected = r.change.collected.split_off(&(target + 1));
    r.change.validated = r.change.validated.split_off(&(target + 1));
    r.change.published = r.change.published.split_off(&(target + 1));
    r.change.pending_new_epoch = r.change.pending_new_epoch.split_off(&(target + 1));
    r.change.pending_entry = r.change.pending_entry.split_off(&(target + 1));
    r.change.rb.retain(|&(_, t), _| t >= target);
    let live: BTreeSet<(ReplicaId, u64)> = r.change.rb.keys().copied().collect();
    r.change.rb_index.retain(|_, k| live.contains(k));

    r.meter.set_context(target, MeterClass::Epoch);

    // Slots a quorum already committed finalize without re-running.
    for (_, pack) in &derived.finalized {
        let d = pack.identity();
        r.apply_execution(pack, d, true, out);
    }

    // Seed the inherited slots: install each as pre-prepared, and answer
    // foreign leaders' slots with a prepare share right away — the inherited
    // pack stands in for the pre-prepare they will never send.
    let me = r.cfg.id;
    for (&g, pack) in &derived.hanging_packs {
        let leader = derived.slots.leader_of_global(g).expect("inherited slots are assigned");
        let local = derived.slots.slots(leader).local_of(g).expect("assigned above");
        let mut slot = Slot::new(local, g, pack.clone(), true);
        let d = slot.digest;
        if leader != me {
            let share = crypto::sign_partial(me, d, &mut r.meter);
            slot.prepare_sent = true;
            out.msgs.push((
                Destination::Replica(leader),
                ProtocolMessage::Prepare { backup: me, hash: d, p_cert: share },
            ));
        }
        r.install_slot(leader, slot, out);
    }
    let own_hanging =
        derived.wire.hanging.get(&me).map_or(0, |h| h.len() as u64);
    r.logs[me.0 as usize].next_propose = own_hanging + 1;

    r.set_timer(TimerKind::Epoch, r.cfg.epoch_timer, out);
    r.set_timer(TimerKind::ArmProgress, 5 * r.cfg.delta, out);
    out.observations.push(Observation::EnteredEpoch { epoch: target });
    r.drain_future(target);
    r.maybe_propose(out);
    retry_change_work(r, out);
}
