//! The replica state machine: every replica leads its own lane of sequence
//! numbers while backing up everyone else's, so agreement runs on all lanes in
//! parallel.  Leaders collect signature shares and publish combined
//! certificates; backups answer each certificate with the next share.  An
//! epoch fixes the lane capacities and the client-bucket assignment; epochs
//! are replaced wholesale through the change machinery in [`change`].
//!
//! The struct is driven entirely by [`Event`]s and returns everything it wants
//! to say or schedule in [`Outputs`] — no channels, no clock, no I/O — which
//! is what makes runs replayable.

mod change;
mod log;

pub use change::{ChangeState, DerivedEpoch, DeriveError};
pub use log::{ActiveEpoch, LeaderLog, Phase, Slot};

use crate::crypto::{self, AuthenticatorMeter, MeterClass};
use crate::types::{
    auth_tag, digest_parts, ClientId, Digest, EpochChangeMsg, Pack, ProtocolMessage, ReplicaId,
    Request, SystemParams, NULL_CLIENT,
};
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// Static per-replica configuration; identical across replicas except for `id`.
#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    pub params: SystemParams,
    pub id: ReplicaId,
    /// Buckets per leader.
    pub m: u64,
    /// Checkpoint interval and watermark half-window.
    pub k: u64,
    /// Capacity floor.
    pub c_min: u64,
    /// Primary rotation window length.
    pub g: u64,
    /// Epoch duration timer.
    pub epoch_timer: u64,
    /// Per-leader no-progress timeout.
    pub progress_timer: u64,
    /// Epoch-change completion timeout base.
    pub change_timer: u64,
    /// Network delay bound used for derived delays.
    pub delta: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum TimerKind {
    /// Whole-epoch duration; expiry calls a change.
    Epoch,
    /// Delay after entry before per-leader progress timers start.
    ArmProgress,
    /// One leader made no observable progress for too long.
    NoProgress(ReplicaId),
    /// The announced change did not complete in time.
    EpochChange,
}

#[derive(Clone, Debug)]
pub enum Event {
    /// Boot into the first epoch.
    Init,
    Message(ProtocolMessage),
    /// A previously requested timer fired.  Stale generations are ignored.
    Timer { kind: TimerKind, gen: u64 },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Destination {
    AllReplicas,
    Replica(ReplicaId),
    Client(ClientId),
}

#[derive(Clone, Copy, Debug)]
pub struct TimerReq {
    pub kind: TimerKind,
    pub gen: u64,
    pub delay: u64,
}

/// Externally visible effects, consumed by the harness for metrics and audits.
#[derive(Clone, Debug)]
pub enum Observation {
    Committed { global: u64, epoch: u64, leader: ReplicaId, digest: Digest, null: bool },
    Executed { global: u64, digest: Digest, r_hash: Digest, null: bool },
    EnteredEpoch { epoch: u64 },
    ChangeCalled { target: u64 },
    /// An otherwise valid epoch entry was refused by a local safety check.
    Refused { target: u64, reason: String },
}

#[derive(Default, Debug)]
pub struct Outputs {
    pub msgs: Vec<(Destination, ProtocolMessage)>,
    pub timers: Vec<TimerReq>,
    pub observations: Vec<Observation>,
    pub notes: Vec<String>,
}

/// Commit-phase shares do not sign the proposal digest again; they sign the
/// prepared certificate, binding the commit to one specific quorum's output.
pub(crate) fn commit_domain(prepared_tag: &Digest) -> Digest {
    digest_parts(&[b"cmt", &prepared_tag.0])
}

pub(crate) fn echo_domain(conf_hash: &Digest) -> Digest {
    digest_parts(&[b"rb-echo", &conf_hash.0])
}

pub(crate) fn ready_domain(conf_hash: &Digest) -> Digest {
    digest_parts(&[b"rb-ready", &conf_hash.0])
}

/// Messages that arrived before the state they refer to exists, keyed by the
/// digest that will unlock them.  FIFO-capped by digest so a flood of garbage
/// hashes cannot grow it without bound.
#[derive(Debug, Default)]
struct WaitBuffer {
    by_digest: BTreeMap<Digest, Vec<ProtocolMessage>>,
    order: VecDeque<Digest>,
    cap: usize,
}

impl WaitBuffer {
    fn new(cap: usize) -> Self {
        WaitBuffer { by_digest: BTreeMap::new(), order: VecDeque::new(), cap }
    }

    fn push(&mut self, d: Digest, msg: ProtocolMessage) {
        let bucket = self.by_digest.entry(d).or_insert_with(|| {
            self.order.push_back(d);
            Vec::new()
        });
        if bucket.len() < 8 {
            bucket.push(msg);
        }
        while self.order.len() > self.cap {
            if let Some(old) = self.order.pop_front() {
                self.by_digest.remove(&old);
            }
        }
    }

    fn take(&mut self, d: &Digest) -> Vec<ProtocolMessage> {
        match self.by_digest.remove(d) {
            Some(v) => {
                self.order.retain(|x| x != d);
                v
            }
            None => Vec::new(),
        }
    }
}

/// Timer freshness: each (kind) carries a generation; setting or cancelling
/// bumps it, and a firing with a stale generation is ignored.
#[derive(Debug, Default)]
struct TimerGens {
    epoch: u64,
    arm: u64,
    change: u64,
    progress: BTreeMap<ReplicaId, u64>,
}

impl TimerGens {
    fn bump(&mut self, kind: TimerKind) -> u64 {
        let slot = match kind {
            TimerKind::Epoch => &mut self.epoch,
            TimerKind::ArmProgress => &mut self.arm,
            TimerKind::EpochChange => &mut self.change,
            TimerKind::NoProgress(v) => self.progress.entry(v).or_insert(0),
        };
        *slot += 1;
        *slot
    }

    fn current(&self, kind: TimerKind) -> u64 {
        match kind {
            TimerKind::Epoch => self.epoch,
            TimerKind::ArmProgress => self.arm,
            TimerKind::EpochChange => self.change,
            TimerKind::NoProgress(v) => self.progress.get(&v).copied().unwrap_or(0),
        }
    }
}

/// One protocol participant.  Everything it believes lives here; everything it
/// does comes out of [`Replica::handle`].
pub struct Replica {
    pub(crate) cfg: ReplicaConfig,
    pub meter: AuthenticatorMeter,
    pub(crate) epoch: u64,
    pub(crate) active: Option<ActiveEpoch>,
    pub(crate) logs: Vec<LeaderLog>,
    /// Pack identity -> (lane, local), for hash-addressed messages.
    pub(crate) by_digest: BTreeMap<Digest, (ReplicaId, u64)>,
    /// Global sequence number -> (pack identity, request hash) of everything
    /// this replica executed or finalized.  Never rolled back.
    pub(crate) executed: BTreeMap<u64, (Digest, Digest)>,
    /// Per client: newest answered timestamp and that request's hash.
    answered: BTreeMap<ClientId, (u64, Digest)>,
    /// Request hash -> cached answer, for idempotent replies.
    answer_cache: BTreeMap<Digest, ProtocolMessage>,
    /// Admitted, not yet proposed client requests in arrival order.
    pending: BTreeMap<u64, Request>,
    pending_index: BTreeMap<Digest, u64>,
    /// Request hashes this replica proposed in the current epoch.
    proposed: BTreeSet<Digest>,
    pub(crate) change: ChangeState,
    timer_gens: TimerGens,
    progress_armed: bool,
    progress_expired: BTreeSet<ReplicaId>,
    waiters: WaitBuffer,
    /// Messages for epochs ahead of ours, capped FIFO.
    future: VecDeque<(u64, ProtocolMessage)>,
    replay: VecDeque<ProtocolMessage>,
    arrival_seq: u64,
}

impl Replica {
    pub fn new(cfg: ReplicaConfig) -> Self {
        assert!(cfg.id.0 < cfg.params.n as u64, "replica id out of range");
        assert!(cfg.k >= 1 && cfg.c_min >= cfg.k, "capacity floor below checkpoint interval");
        assert_eq!(cfg.c_min % cfg.k, 0, "capacity floor must sit on a checkpoint boundary");
        Replica {
            cfg,
            meter: AuthenticatorMeter::new(),
            epoch: 0,
            active: None,
            logs: Vec::new(),
            by_digest: BTreeMap::new(),
            executed: BTreeMap::new(),
            answered: BTreeMap::new(),
            answer_cache: BTreeMap::new(),
            pending: BTreeMap::new(),
            pending_index: BTreeMap::new(),
            proposed: BTreeSet::new(),
            change: ChangeState::new(),
            timer_gens: TimerGens::default(),
            progress_armed: false,
            progress_expired: BTreeSet::new(),
            waiters: WaitBuffer::new(256),
            future: VecDeque::new(),
            replay: VecDeque::new(),
            arrival_seq: 0,
        }
    }

    pub fn id(&self) -> ReplicaId {
        self.cfg.id
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn announced_target(&self) -> Option<u64> {
        self.change.announced
    }

    pub fn in_change(&self) -> bool {
        self.change.announced.is_some()
    }

    /// Per-lane commit-certificate counts for the current epoch.
    pub fn achieved(&self) -> Vec<u64> {
        self.logs.iter().map(|l| l.achieved()).collect()
    }

    pub fn executed_entries(&self) -> &BTreeMap<u64, (Digest, Digest)> {
        &self.executed
    }

    pub fn handle(&mut self, ev: Event) -> Outputs {
        let mut out = Outputs::default();
        self.dispatch(ev, &mut out);
        while let Some(m) = self.replay.pop_front() {
            self.dispatch(Event::Message(m), &mut out);
        }
        out
    }

    fn dispatch(&mut self, ev: Event, out: &mut Outputs) {
        match ev {
            Event::Init => self.on_init(out),
            Event::Message(m) => self.on_message(m, out),
            Event::Timer { kind, gen } => self.on_timer(kind, gen, out),
        }
        self.scan_triggers(out);
    }

    fn on_init(&mut self, out: &mut Outputs) {
        let derived = change::derive_genesis(&self.cfg);
        change::enter_epoch(self, 1, derived, out);
    }

    fn on_message(&mut self, msg: ProtocolMessage, out: &mut Outputs) {
        match msg {
            ProtocolMessage::PrePrepare { leader, pack, sig } => {
                self.on_preprepare(leader, pack, sig, out)
            }
            ProtocolMessage::Prepare { backup, hash, p_cert } => {
                self.on_prepare(backup, hash, p_cert, out)
            }
            ProtocolMessage::Prepared { leader, hash, p_cert } => {
                self.on_prepared(leader, hash, p_cert, out)
            }
            ProtocolMessage::Commit { backup, hash, c_cert } => {
                self.on_commit(backup, hash, c_cert, out)
            }
            ProtocolMessage::Committed { leader, hash, c_cert } => {
                self.on_committed(leader, hash, c_cert, out)
            }
            ProtocolMessage::RequestMsg { client, request, r_hash, auth } => {
                self.on_request(client, request, r_hash, auth, out)
            }
            ProtocolMessage::NewCheckpoint { backup, c_sn, digest, c_cert } => {
                self.on_new_checkpoint(backup, c_sn, digest, c_cert, out)
            }
            ProtocolMessage::Checkpointed { leader, c_sn, digest, c_cert } => {
                self.on_checkpointed(leader, c_sn, digest, c_cert, out)
            }
            ProtocolMessage::EpochChange(ec) => change::on_epoch_change(self, ec, out),
            ProtocolMessage::NewEpoch { primary, eco, ec_cert, e_hash, eco_proof } => {
                change::on_new_epoch(self, primary, eco, ec_cert, e_hash, eco_proof, out)
            }
            ProtocolMessage::NewEpochConf { primary, config, conf_hash, sig } => {
                change::on_new_epoch_conf(self, primary, config, conf_hash, sig, out)
            }
            ProtocolMessage::RbEcho { replica, conf_hash, sig } => {
                change::on_rb_echo(self, replica, conf_hash, sig, out)
            }
            ProtocolMessage::RbReady { replica, conf_hash, sig } => {
                change::on_rb_ready(self, replica, conf_hash, sig, out)
            }
            ProtocolMessage::Fetch { replica, wanted, auth } => {
                self.on_fetch(replica, wanted, auth, out)
            }
            // Replies are harness plumbing; replicas don't consume them.
            ProtocolMessage::FetchReply { .. } | ProtocolMessage::Answer { .. } => {}
        }
    }

    // ---- normal path: pre-prepare through execution --------------------------

    fn on_preprepare(
        &mut self,
        leader: ReplicaId,
        pack: Pack,
        sig: crate::crypto::PartialSignature,
        out: &mut Outputs,
    ) {
        if self.in_change() || self.active.is_none() {
            return;
        }
        if pack.epoch != self.epoch {
            if pack.epoch > self.epoch {
                self.buffer_future(pack.epoch, ProtocolMessage::PrePrepare { leader, pack, sig });
            }
            return;
        }
        if leader == self.cfg.id || leader.0 >= self.cfg.params.n as u64 {
            return;
        }
        let local = {
            let active = self.active.as_ref().unwrap();
            match active.slots.slots(leader).local_of(pack.sn) {
                Some(l) => l,
                None => return, // not one of this leader's globals
            }
        };
        let lane = leader.0 as usize;
        {
            let lg = &self.logs[lane];
            if local <= lg.watermarks.low || lg.slots.contains_key(&local) {
                return;
            }
            if local > lg.watermarks.high() {
                // Ahead of the window: hold until a checkpoint admits it, with
                // a hard bound so a runaway lane cannot hoard memory.
                if local <= lg.watermarks.low + 4 * self.cfg.k {
                    self.logs[lane]
                        .held_preprepares
                        .insert(local, ProtocolMessage::PrePrepare { leader, pack, sig });
                }
                return;
            }
        }
        // Structural discipline before any metered work.
        if pack.requests.len() != 1 || pack.opt_ref.is_some() {
            return;
        }
        let req = &pack.requests[0];
        if req.is_null()
            || req.request_hash != Request::hash_fields(req.client, &req.operation, req.timestamp)
        {
            return;
        }
        {
            let active = self.active.as_ref().unwrap();
            if active.buckets.leader_for(req.client) != leader {
                return;
            }
        }
        let d = pack.identity();
        if sig.signer != leader || sig.over != d {
            return;
        }
        self.meter.set_context(self.epoch, MeterClass::Epoch);
        if !crypto::verify_partial(&sig, leader, &d, &mut self.meter) {
            return;
        }

        let global = pack.sn;
        let slot = Slot::new(local, global, pack, false);
        self.install_slot(leader, slot, out);

        // Canonical reply: our prepare share, straight back to the collector.
        let share = crypto::sign_partial(self.cfg.id, d, &mut self.meter);
        let lg = &mut self.logs[lane];
        if let Some(s) = lg.slots.get_mut(&local) {
            s.prepare_sent = true;
        }
        out.msgs.push((
            Destination::Replica(leader),
            ProtocolMessage::Prepare { backup: self.cfg.id, hash: d, p_cert: share },
        ));
        // Early certificates for this digest can proceed now.
        for m in self.waiters.take(&d) {
            self.replay.push_back(m);
        }
    }

    /// Record a fresh slot: index its identity, extend the lane's checkpoint
    /// content chain, and release anything that was waiting on the digest.
    fn install_slot(&mut self, leader: ReplicaId, slot: Slot, out: &mut Outputs) {
        let lane = leader.0 as usize;
        let local = slot.local;
        let d = slot.digest;
        self.by_digest.insert(d, (leader, local));
        let newly = {
            let lg = &mut self.logs[lane];
            lg.slots.insert(local, slot);
            lg.register_ident(local, d, self.cfg.k, self.epoch)
        };
        for m in self.waiters.take(&d) {
            self.replay.push_back(m);
        }
        // Checkpoint certificates that outran our identity prefix.
        for h in newly {
            if let Some(parked) = self.logs[lane].pending_ckpt.remove(&h) {
                for (claimed, cert) in parked {
                    self.replay.push_back(ProtocolMessage::Checkpointed {
                        leader,
                        c_sn: h,
                        digest: claimed,
                        c_cert: cert,
                    });
                }
            }
        }
        let _ = out;
    }

    fn on_prepare(
        &mut self,
        backup: ReplicaId,
        hash: Digest,
        p_cert: crate::crypto::PartialSignature,
        out: &mut Outputs,
    ) {
        // No in-change gate here or in the rest of the ladder: slots already
        // installed may finish committing while a change is announced.  Only
        // *new* work (pre-prepares, proposals) stops.  A slot that commits
        // after our change object went out is simply under-reported there;
        // entry reconciles it.
        let me = self.cfg.id;
        let Some(&(leader, local)) = self.by_digest.get(&hash) else {
            // Inherited-slot shares can outrun our own entry into the epoch
            // that seeds them; park until the digest means something here.
            self.waiters.push(hash, ProtocolMessage::Prepare { backup, hash, p_cert });
            return;
        };
        if leader != me {
            return; // shares go to the collector only
        }
        let f2 = 2 * self.cfg.params.f;
        let lane = me.0 as usize;
        {
            let Some(slot) = self.logs[lane].slots.get(&local) else { return };
            if slot.phase != Phase::PrePrepared {
                return; // certificate already formed; late shares cost nothing
            }
            if p_cert.signer != backup
                || backup == me
                || backup.0 >= self.cfg.params.n as u64
                || p_cert.over != hash
                || slot.prep_partials.iter().any(|p| p.signer == backup)
                || slot.prep_partials.len() >= f2
            {
                return;
            }
        }
        self.meter.set_context(self.epoch, MeterClass::Epoch);
        if !crypto::verify_partial(&p_cert, backup, &hash, &mut self.meter) {
            return;
        }
        let ready = {
            let slot = self.logs[lane].slots.get_mut(&local).unwrap();
            slot.prep_partials.push(p_cert);
            slot.prep_partials.len() == f2
        };
        if !ready {
            return;
        }
        let (own, partials) = {
            let slot = self.logs[lane].slots.get(&local).unwrap();
            let own = slot
                .own_preprepare
                .clone()
                .unwrap_or_else(|| crypto::unmetered_share(me, hash));
            (own, slot.prep_partials.clone())
        };
        match crypto::combine(&own, &partials, self.cfg.params.quorum(), &mut self.meter) {
            Ok(cert) => {
                let slot = self.logs[lane].slots.get_mut(&local).unwrap();
                slot.phase = Phase::Prepared;
                slot.prepared_cert = Some(cert.clone());
                out.msgs.push((
                    Destination::AllReplicas,
                    ProtocolMessage::Prepared { leader: me, hash, p_cert: cert },
                ));
            }
            Err(e) => out.notes.push(format!("prepare combine failed on {}: {e}", hash.short())),
        }
    }

    fn on_prepared(
        &mut self,
        leader: ReplicaId,
        hash: Digest,
        p_cert: crate::crypto::CombinedSignature,
        out: &mut Outputs,
    ) {
        let me = self.cfg.id;
        let Some(&(lane_leader, local)) = self.by_digest.get(&hash) else {
            self.waiters.push(hash, ProtocolMessage::Prepared { leader, hash, p_cert });
            return;
        };
        if lane_leader != leader || leader == me {
            return;
        }
        let lane = leader.0 as usize;
        {
            let Some(slot) = self.logs[lane].slots.get(&local) else { return };
            if slot.phase >= Phase::Prepared {
                return;
            }
            if p_cert.over != hash || p_cert.contributors.len() < self.cfg.params.quorum() {
                return;
            }
        }
        self.meter.set_context(self.epoch, MeterClass::Epoch);
        if !crypto::verify_combined(&p_cert, &hash, self.cfg.params.quorum(), &mut self.meter) {
            return;
        }
        let cd = commit_domain(&p_cert.tag);
        {
            let slot = self.logs[lane].slots.get_mut(&local).unwrap();
            slot.phase = Phase::Prepared;
            slot.prepared_cert = Some(p_cert);
        }
        let share = crypto::sign_partial(me, cd, &mut self.meter);
        self.logs[lane].slots.get_mut(&local).unwrap().commit_sent = true;
        out.msgs.push((
            Destination::Replica(leader),
            ProtocolMessage::Commit { backup: me, hash, c_cert: share },
        ));
        for m in self.waiters.take(&hash) {
            self.replay.push_back(m);
        }
    }

    fn on_commit(
        &mut self,
        backup: ReplicaId,
        hash: Digest,
        c_cert: crate::crypto::PartialSignature,
        out: &mut Outputs,
    ) {
        let me = self.cfg.id;
        let Some(&(leader, local)) = self.by_digest.get(&hash) else {
            self.waiters.push(hash, ProtocolMessage::Commit { backup, hash, c_cert });
            return;
        };
        if leader != me {
            return;
        }
        let f2 = 2 * self.cfg.params.f;
        let lane = me.0 as usize;
        let cd = {
            let Some(slot) = self.logs[lane].slots.get(&local) else { return };
            if slot.phase != Phase::Prepared {
                return;
            }
            let cd = commit_domain(&slot.prepared_cert.as_ref().unwrap().tag);
            if c_cert.signer != backup
                || backup == me
                || backup.0 >= self.cfg.params.n as u64
                || c_cert.over != cd
                || slot.commit_partials.iter().any(|p| p.signer == backup)
                || slot.commit_partials.len() >= f2
            {
                return;
            }
            cd
        };
        self.meter.set_context(self.epoch, MeterClass::Epoch);
        if !crypto::verify_partial(&c_cert, backup, &cd, &mut self.meter) {
            return;
        }
        let ready = {
            let slot = self.logs[lane].slots.get_mut(&local).unwrap();
            slot.commit_partials.push(c_cert);
            slot.commit_partials.len() == f2
        };
        if !ready {
            return;
        }
        let partials = self.logs[lane].slots.get(&local).unwrap().commit_partials.clone();
        let own = crypto::unmetered_share(me, cd);
        match crypto::combine(&own, &partials, self.cfg.params.quorum(), &mut self.meter) {
            Ok(cert) => {
                {
                    let slot = self.logs[lane].slots.get_mut(&local).unwrap();
                    slot.phase = Phase::Committed;
                    slot.committed_cert = Some(cert.clone());
                }
                out.msgs.push((
                    Destination::AllReplicas,
                    ProtocolMessage::Committed { leader: me, hash, c_cert: cert },
                ));
                self.note_commit_at(me, local, hash, out);
                self.try_execute(me, out);
            }
            Err(e) => out.notes.push(format!("commit combine failed on {}: {e}", hash.short())),
        }
    }

    fn on_committed(
        &mut self,
        leader: ReplicaId,
        hash: Digest,
        c_cert: crate::crypto::CombinedSignature,
        out: &mut Outputs,
    ) {
        let me = self.cfg.id;
        let Some(&(lane_leader, local)) = self.by_digest.get(&hash) else {
            self.waiters.push(hash, ProtocolMessage::Committed { leader, hash, c_cert });
            return;
        };
        if lane_leader != leader || leader == me {
            return;
        }
        let lane = leader.0 as usize;
        let cd = {
            let Some(slot) = self.logs[lane].slots.get(&local) else { return };
            if slot.phase >= Phase::Committed {
                return;
            }
            if !slot.commit_sent {
                // Certificate outran its prerequisites; hold until our commit
                // share is out so every slot walks the same ladder.
                self.waiters.push(hash, ProtocolMessage::Committed { leader, hash, c_cert });
                return;
            }
            commit_domain(&slot.prepared_cert.as_ref().unwrap().tag)
        };
        if c_cert.over != cd || c_cert.contributors.len() < self.cfg.params.quorum() {
            return;
        }
        self.meter.set_context(self.epoch, MeterClass::Epoch);
        if !crypto::verify_combined(&c_cert, &cd, self.cfg.params.quorum(), &mut self.meter) {
            return;
        }
        {
            let slot = self.logs[lane].slots.get_mut(&local).unwrap();
            slot.phase = Phase::Committed;
            slot.committed_cert = Some(c_cert);
        }
        self.note_commit_at(leader, local, hash, out);
        self.try_execute(leader, out);
    }

    /// Shared commit bookkeeping: achievement count, progress credit,
    /// exhaustion, and the externally visible record.
    fn note_commit_at(&mut self, leader: ReplicaId, local: u64, hash: Digest, out: &mut Outputs) {
        let lane = leader.0 as usize;
        let (global, null) = {
            let slot = self.logs[lane].slots.get(&local).unwrap();
            (slot.global, slot.pack.requests.first().map(|r| r.is_null()).unwrap_or(true))
        };
        let was = self.logs[lane].exhausted;
        self.logs[lane].note_commit(local);
        out.observations.push(Observation::Committed {
            global,
            epoch: self.epoch,
            leader,
            digest: hash,
            null,
        });
        if self.logs[lane].exhausted && !was {
            self.on_lane_exhausted(leader);
        } else {
            self.progress_credit(leader, out);
        }
    }

    fn try_execute(&mut self, leader: ReplicaId, out: &mut Outputs) {
        let lane = leader.0 as usize;
        loop {
            let next = self.logs[lane].executed_local + 1;
            let ready = matches!(
                self.logs[lane].slots.get(&next),
                Some(s) if s.phase >= Phase::Committed
            );
            if !ready {
                return;
            }
            let (pack, digest, seeded) = {
                let slot = self.logs[lane].slots.get_mut(&next).unwrap();
                slot.phase = Phase::Executed;
                (slot.pack.clone(), slot.digest, slot.seeded)
            };
            self.logs[lane].executed_local = next;
            self.apply_execution(&pack, digest, seeded, out);
            if next % self.cfg.k == 0 {
                self.checkpoint_moment(leader, next, out);
            }
        }
    }

    /// State-machine effect of one slot: record it, answer the client, and
    /// retire the request from local queues.
    fn apply_execution(&mut self, pack: &Pack, digest: Digest, seeded: bool, out: &mut Outputs) {
        let global = pack.sn;
        let req = &pack.requests[0];
        if let Some(&(prior, _)) = self.executed.get(&global) {
            debug_assert_eq!(prior, digest, "one global, one identity");
            return;
        }
        self.executed.insert(global, (digest, req.request_hash));
        out.observations.push(Observation::Executed {
            global,
            digest,
            r_hash: req.request_hash,
            null: req.is_null(),
        });
        if let Some(seq) = self.pending_index.remove(&req.request_hash) {
            self.pending.remove(&seq);
        }
        if req.client == NULL_CLIENT {
            return;
        }
        let answer = self.answer_cache.entry(req.request_hash).or_insert_with(|| {
            let response = digest_parts(&[b"resp", &req.request_hash.0]);
            ProtocolMessage::Answer {
                replica: self.cfg.id,
                sn: global,
                epoch: pack.epoch,
                response,
                r_hash: req.request_hash,
                auth: auth_tag("ans", self.cfg.id.0, &req.request_hash),
            }
        });
        out.msgs.push((Destination::Client(req.client), answer.clone()));
        // Seeded re-runs carry no timestamp, so they cannot move the
        // freshness floor for the client.
        if !seeded && req.timestamp > 0 {
            let e = self.answered.entry(req.client).or_insert((0, req.request_hash));
            if req.timestamp >= e.0 {
                *e = (req.timestamp, req.request_hash);
            }
        }
    }

    // ---- checkpoints ---------------------------------------------------------

    /// Our own execution crossed a checkpoint boundary: sign the rolling
    /// content.  The lane leader collects; everyone else sends the share off.
    fn checkpoint_moment(&mut self, leader: ReplicaId, s: u64, out: &mut Outputs) {
        let lane = leader.0 as usize;
        let content = match self.logs[lane].contents.get(&s) {
            Some(c) => *c,
            None => {
                debug_assert!(false, "executed through {s} without its content");
                return;
            }
        };
        self.meter.set_context(self.epoch, MeterClass::Epoch);
        let share = crypto::sign_partial(self.cfg.id, content, &mut self.meter);
        self.logs[lane].my_ckpt.insert(s, share.clone());
        if leader == self.cfg.id {
            self.try_combine_checkpoint(s, out);
        } else {
            out.msgs.push((
                Destination::Replica(leader),
                ProtocolMessage::NewCheckpoint {
                    backup: self.cfg.id,
                    c_sn: s,
                    digest: content,
                    c_cert: share,
                },
            ));
        }
    }

    fn on_new_checkpoint(
        &mut self,
        backup: ReplicaId,
        c_sn: u64,
        digest: Digest,
        c_cert: crate::crypto::PartialSignature,
        out: &mut Outputs,
    ) {
        let me = self.cfg.id;
        let lane = me.0 as usize;
        if backup == me || backup.0 >= self.cfg.params.n as u64 {
            return;
        }
        {
            let lg = &self.logs[lane];
            if c_sn == 0 || c_sn % self.cfg.k != 0 || c_sn > lg.capacity || c_sn <= lg.watermarks.low {
                return;
            }
        }
        if c_cert.signer != backup || c_cert.over != digest {
            return;
        }
        // Shares are held raw until our own execution reaches the height;
        // verification happens against our content, never the sender's claim.
        self.logs[lane].raw_ckpt.entry(c_sn).or_default().entry(backup).or_insert(c_cert);
        if self.logs[lane].my_ckpt.contains_key(&c_sn) {
            self.try_combine_checkpoint(c_sn, out);
        }
    }

    fn try_combine_checkpoint(&mut self, s: u64, out: &mut Outputs) {
        let me = self.cfg.id;
        let lane = me.0 as usize;
        let f2 = 2 * self.cfg.params.f;
        let Some(own) = self.logs[lane].my_ckpt.get(&s).cloned() else { return };
        let content = own.over;
        if self.logs[lane].stable.contains_key(&s) {
            return;
        }
        self.meter.set_context(self.epoch, MeterClass::Epoch);
        let raw = self.logs[lane].raw_ckpt.remove(&s).unwrap_or_default();
        for (sender, share) in raw {
            let enough = self.logs[lane].verified_ckpt.get(&s).map_or(false, |v| v.len() >= f2);
            if enough {
                break;
            }
            if share.over != content {
                continue; // wrong content claim; costs us nothing
            }
            if crypto::verify_partial(&share, sender, &content, &mut self.meter) {
                self.logs[lane].verified_ckpt.entry(s).or_default().push(share);
            }
        }
        let have = self.logs[lane].verified_ckpt.get(&s).map_or(0, |v| v.len());
        if have < f2 {
            return;
        }
        let foreign = self.logs[lane].verified_ckpt.get(&s).unwrap().clone();
        match crypto::combine(&own, &foreign, self.cfg.params.quorum(), &mut self.meter) {
            Ok(cert) => {
                out.msgs.push((
                    Destination::AllReplicas,
                    ProtocolMessage::Checkpointed {
                        leader: me,
                        c_sn: s,
                        digest: content,
                        c_cert: cert.clone(),
                    },
                ));
                self.make_stable(me, s, content, cert, out);
            }
            Err(e) => out.notes.push(format!("checkpoint combine failed at {s}: {e}")),
        }
    }

    fn on_checkpointed(
        &mut self,
        leader: ReplicaId,
        c_sn: u64,
        digest: Digest,
        c_cert: crate::crypto::CombinedSignature,
        out: &mut Outputs,
    ) {
        if leader == self.cfg.id || leader.0 >= self.cfg.params.n as u64 {
            return;
        }
        let lane = leader.0 as usize;
        {
            let lg = &self.logs[lane];
            if c_sn == 0 || c_sn % self.cfg.k != 0 || c_sn > lg.capacity || c_sn <= lg.watermarks.low {
                return;
            }
        }
        let expected = self.logs[lane].contents.get(&c_sn).copied();
        match expected {
            Some(content) => {
                // A valid certificate over anything but our own rolling content
                // would need a quorum signing a different history; with at most
                // f faults that cannot happen, so a mismatch is just garbage.
                if digest != content
                    || c_cert.over != content
                    || c_cert.contributors.len() < self.cfg.params.quorum()
                {
                    return;
                }
                self.meter.set_context(self.epoch, MeterClass::Epoch);
                if !crypto::verify_combined(&c_cert, &content, self.cfg.params.quorum(), &mut self.meter)
                {
                    return;
                }
                self.make_stable(leader, c_sn, content, c_cert, out);
            }
            None => {
                // Our identity prefix hasn't reached the height yet; park the
                // certificate and retry as proposals register.
                let parked = self.logs[lane].pending_ckpt.entry(c_sn).or_default();
                if parked.len() < 3 && !parked.iter().any(|(d, _)| *d == digest) {
                    parked.push((digest, c_cert));
                }
            }
        }
    }

    /// A checkpoint certificate became trustworthy: raise the watermark, fold
    /// everything below it, and release held work.
    fn make_stable(
        &mut self,
        leader: ReplicaId,
        s: u64,
        content: Digest,
        cert: crate::crypto::CombinedSignature,
        out: &mut Outputs,
    ) {
        let lane = leader.0 as usize;
        if s <= self.logs[lane].watermarks.low {
            return;
        }
        if self.logs[lane].watermarks.advance(s).is_err() {
            return;
        }
        let epoch = self.epoch;
        let was = self.logs[lane].exhausted;
        {
            let lg = &mut self.logs[lane];
            lg.stable.insert(
                s,
                crate::types::CheckpointEvidence {
                    epoch,
                    local_sn: s,
                    content,
                    cert: Some(cert),
                },
            );
            let dead: Vec<u64> = lg.slots.range(..=s).map(|(l, _)| *l).collect();
            for l in dead {
                if let Some(slot) = lg.slots.remove(&l) {
                    // Identity index entries die with their slots.
                    // (Removed below, outside the lane borrow.)
                    lg.idents.remove(&l);
                    let _ = slot;
                }
            }
            lg.committed_above.retain(|&l| l > s);
            if lg.executed_local < s {
                lg.executed_local = s;
            }
            lg.raw_ckpt.retain(|&h, _| h > s);
            lg.verified_ckpt.retain(|&h, _| h > s);
            lg.my_ckpt.retain(|&h, _| h > s);
            lg.pending_ckpt.retain(|&h, _| h > s);
            if lg.watermarks.low >= lg.capacity {
                lg.exhausted = true;
            }
        }
        self.by_digest.retain(|_, &mut (v, l)| !(v == leader && l <= s));
        if self.logs[lane].exhausted && !was {
            self.on_lane_exhausted(leader);
        } else {
            self.progress_credit(leader, out);
        }
        self.pump_lane(leader, out);
    }

    /// Watermark moved (or the lane just formed): release held pre-prepares
    /// and, on our own lane, keep proposing.
    fn pump_lane(&mut self, leader: ReplicaId, out: &mut Outputs) {
        let lane = leader.0 as usize;
        let high = self.logs[lane].watermarks.high();
        let admitted: Vec<u64> = self.logs[lane]
            .held_preprepares
            .range(..=high)
            .map(|(l, _)| *l)
            .collect();
        for l in admitted {
            if let Some(m) = self.logs[lane].held_preprepares.remove(&l) {
                self.replay.push_back(m);
            }
        }
        if leader == self.cfg.id {
            self.maybe_propose(out);
        }
    }

    /// Leader work on our own lane: turn pending requests we own into
    /// proposals while capacity and the watermark window allow.
    fn maybe_propose(&mut self, out: &mut Outputs) {
        if self.in_change() || self.active.is_none() {
            return;
        }
        let me = self.cfg.id;
        let lane = me.0 as usize;
        loop {
            let next = self.logs[lane].next_propose;
            if next > self.logs[lane].capacity || next > self.logs[lane].watermarks.high() {
                return;
            }
            // Oldest admitted request in one of our buckets.
            let pick = {
                let active = self.active.as_ref().unwrap();
                self.pending
                    .iter()
                    .find(|(_, r)| {
                        active.buckets.leader_for(r.client) == me
                            && !self.proposed.contains(&r.request_hash)
                    })
                    .map(|(seq, r)| (*seq, r.clone()))
            };
            let Some((seq, req)) = pick else { return };
            self.pending.remove(&seq);
            self.pending_index.remove(&req.request_hash);
            self.proposed.insert(req.request_hash);

            let global = {
                let active = self.active.as_ref().unwrap();
                active.slots.slots(me).global_of(next).unwrap()
            };
            let pack = Pack::new(global, self.epoch, vec![req], None);
            let d = pack.identity();
            self.meter.set_context(self.epoch, MeterClass::Epoch);
            let sig = crypto::sign_partial(me, d, &mut self.meter);
            let mut slot = Slot::new(next, global, pack.clone(), false);
            slot.own_preprepare = Some(sig.clone());
            self.install_slot(me, slot, out);
            self.logs[lane].next_propose = next + 1;
            out.msgs.push((
                Destination::AllReplicas,
                ProtocolMessage::PrePrepare { leader: me, pack, sig },
            ));
        }
    }

    // ---- client requests -----------------------------------------------------

    fn on_request(
        &mut self,
        client: ClientId,
        request: Request,
        r_hash: Digest,
        auth: Digest,
        out: &mut Outputs,
    ) {
        if client == NULL_CLIENT
            || client != request.client
            || r_hash != request.request_hash
            || r_hash != Request::hash_fields(client, &request.operation, request.timestamp)
            || auth != auth_tag("req", client.0, &r_hash)
            || request.timestamp == 0
        {
            return;
        }
        if let Some(&(last_ts, last_hash)) = self.answered.get(&client) {
            if request.timestamp < last_ts {
                return;
            }
            if request.timestamp == last_ts {
                // Retransmission of the answered request: repeat the answer.
                if r_hash == last_hash {
                    if let Some(ans) = self.answer_cache.get(&r_hash) {
                        out.msgs.push((Destination::Client(client), ans.clone()));
                    }
                }
                return;
            }
        }
        if self.proposed.contains(&r_hash) || self.pending_index.contains_key(&r_hash) {
            return;
        }
        if self.pending.len() >= 100_000 {
            return;
        }
        self.arrival_seq += 1;
        self.pending_index.insert(r_hash, self.arrival_seq);
        self.pending.insert(self.arrival_seq, request);
        self.maybe_propose(out);
    }

    // ---- timers and triggers -------------------------------------------------

    fn on_timer(&mut self, kind: TimerKind, gen: u64, out: &mut Outputs) {
        if gen != self.timer_gens.current(kind) {
            return;
        }
        match kind {
            TimerKind::Epoch => {
                if !self.in_change() {
                    let t = self.epoch + 1;
                    self.call_change(t, out);
                }
            }
            TimerKind::ArmProgress => {
                if self.in_change() {
                    return;
                }
                self.progress_armed = true;
                let lanes: Vec<ReplicaId> = self
                    .logs
                    .iter()
                    .filter(|l| !l.exhausted)
                    .map(|l| l.leader)
                    .collect();
                for v in lanes {
                    self.set_timer(TimerKind::NoProgress(v), self.cfg.progress_timer, out);
                }
            }
            TimerKind::NoProgress(v) => {
                if !self.in_change() && !self.logs[v.0 as usize].exhausted {
                    self.progress_expired.insert(v);
                }
            }
            TimerKind::EpochChange => {
                if let Some(t) = self.change.announced {
                    self.change.fails += 1;
                    self.change.timer_started = false;
                    self.call_change(t + 1, out);
                }
            }
        }
    }

    pub(crate) fn set_timer(&mut self, kind: TimerKind, delay: u64, out: &mut Outputs) {
        let gen = self.timer_gens.bump(kind);
        out.timers.push(TimerReq { kind, gen, delay });
    }

    pub(crate) fn cancel_timer(&mut self, kind: TimerKind) {
        self.timer_gens.bump(kind);
    }

    /// Observable progress on a lane: push its no-progress deadline out.
    fn progress_credit(&mut self, v: ReplicaId, out: &mut Outputs) {
        self.progress_expired.remove(&v);
        if self.progress_armed && !self.in_change() {
            self.set_timer(TimerKind::NoProgress(v), self.cfg.progress_timer, out);
        }
    }

    fn on_lane_exhausted(&mut self, v: ReplicaId) {
        self.progress_expired.remove(&v);
        self.cancel_timer(TimerKind::NoProgress(v));
    }

    fn scan_triggers(&mut self, out: &mut Outputs) {
        if self.in_change() || self.active.is_none() {
            return;
        }
        let all_done = !self.logs.is_empty() && self.logs.iter().all(|l| l.exhausted);
        if all_done {
            let t = self.epoch + 1;
            self.call_change(t, out);
            return;
        }
        if self.progress_expired.len() >= self.cfg.params.quorum() {
            let t = self.epoch + 1;
            self.call_change(t, out);
        }
    }

    /// Announce an epoch change toward `target`: freeze normal work, publish
    /// our signed change object, and start waiting for company.
    pub(crate) fn call_change(&mut self, target: u64, out: &mut Outputs) {
        if let Some(a) = self.change.announced {
            if target <= a {
                return;
            }
        }
        if target <= self.epoch {
            return;
        }
        let eco = change::build_eco(self, target);
        self.meter.set_context(self.epoch, MeterClass::Change);
        let e_hash = eco.identity();
        let ec_cert = crypto::sign_partial(self.cfg.id, e_hash, &mut self.meter);
        let msg = EpochChangeMsg { eco, ec_cert, e_hash };
        self.change.collected.entry(target).or_default().insert(self.cfg.id, msg.clone());
        self.change.validated.entry(target).or_default().insert(self.cfg.id);
        self.change.announced = Some(target);
        self.change.timer_started = false;
        self.progress_armed = false;
        self.progress_expired.clear();
        self.cancel_timer(TimerKind::Epoch);
        self.cancel_timer(TimerKind::ArmProgress);
        let lanes: Vec<ReplicaId> = self.logs.iter().map(|l| l.leader).collect();
        for v in lanes {
            self.cancel_timer(TimerKind::NoProgress(v));
        }
        out.msgs.push((Destination::AllReplicas, ProtocolMessage::EpochChange(msg)));
        out.observations.push(Observation::ChangeCalled { target });
        change::maybe_start_change_timer(self, out);
        change::retry_change_work(self, out);
    }

    // ---- plumbing ------------------------------------------------------------

    fn on_fetch(&mut self, replica: ReplicaId, wanted: Digest, auth: Digest, out: &mut Outputs) {
        if auth != auth_tag("fetch", replica.0, &wanted) {
            return;
        }
        if let Some(&(leader, local)) = self.by_digest.get(&wanted) {
            if let Some(slot) = self.logs[leader.0 as usize].slots.get(&local) {
                out.msgs.push((
                    Destination::Replica(replica),
                    ProtocolMessage::FetchReply {
                        replica: self.cfg.id,
                        pack: slot.pack.clone(),
                        auth: auth_tag("fetchr", self.cfg.id.0, &wanted),
                    },
                ));
            }
        }
    }

    fn buffer_future(&mut self, epoch: u64, msg: ProtocolMessage) {
        if self.future.len() >= 4096 {
            self.future.pop_front();
        }
        self.future.push_back((epoch, msg));
    }

    /// Called on epoch entry: messages buffered for the entered epoch replay,
    /// older ones drop.
    pub(crate) fn drain_future(&mut self, entered: u64) {
        let kept: VecDeque<(u64, ProtocolMessage)> = self.future.drain(..).collect();
        for (e, m) in kept {
            if e == entered {
                self.replay.push_back(m);
            } else if e > entered {
                self.future.push_back((e, m));
            }
        }
    }

    pub(crate) fn waiters_take(&mut self, d: &Digest) -> Vec<ProtocolMessage> {
        self.waiters.take(d)
    }

    pub(crate) fn waiters_put(&mut self, d: Digest, m: ProtocolMessage) {
        self.waiters.push(d, m);
    }

    pub(crate) fn push_replay(&mut self, m: ProtocolMessage) {
        self.replay.push_back(m);
    }
}

#[cfg(test)]
mod tests;
