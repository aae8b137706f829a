//! Protocol data structures and their canonical byte encoding.
//!
//! Every message is encoded as a leading one-byte kind tag followed by its
//! fields in declaration order: integers are 64-bit little-endian, digests are
//! 32 raw bytes, variable-length data is length-prefixed, options are a
//! presence byte, and maps iterate in ascending key order. The encoding is
//! the simulator's wire format and the fixture format for golden tests, so it
//! must stay byte-stable.

use crate::crypto::{CombinedSignature, PartialSignature};
use sha2::{Digest as _, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// Replica identifier, a dense index in `[0, n)`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct ReplicaId(pub u64);

impl ReplicaId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ReplicaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Client identifier. `u64::MAX` is reserved for the null client that "sends"
/// gap-filling requests during epoch changes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, serde::Serialize, serde::Deserialize)]
pub struct ClientId(pub u64);

pub const NULL_CLIENT: ClientId = ClientId(u64::MAX);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == NULL_CLIENT {
            write!(f, "c-null")
        } else {
            write!(f, "c{}", self.0)
        }
    }
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short(&self) -> String {
        self.hex()[..8].to_string()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl serde::Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.hex())
    }
}

pub fn digest(bytes: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(bytes);
    Digest(h.finalize().into())
}

/// Digest of several segments without intermediate allocation.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// System size. `n = 3f + 1` always holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
pub struct SystemParams {
    pub n: usize,
    pub f: usize,
}

impl SystemParams {
    pub fn from_f(f: usize) -> Self {
        SystemParams { n: 3 * f + 1, f }
    }

    pub fn from_n(n: usize) -> Option<Self> {
        if n >= 4 && (n - 1) % 3 == 0 {
            Some(SystemParams { n, f: (n - 1) / 3 })
        } else {
            None
        }
    }

    /// Quorum size `2f + 1`: threshold for combined signatures, epoch-change
    /// sets, and reliable-broadcast delivery.
    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> {
        (0..self.n as u64).map(ReplicaId)
    }
}

/// A client operation together with its issuing client and timestamp. The
/// request hash covers (client, operation, timestamp) and is the request's
/// identity everywhere else in the protocol.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Request {
    pub client: ClientId,
    pub operation: Vec<u8>,
    pub timestamp: u64,
    pub request_hash: Digest,
}

impl Request {
    pub fn new(client: ClientId, operation: Vec<u8>, timestamp: u64) -> Self {
        let request_hash = Self::hash_fields(client, &operation, timestamp);
        Request { client, operation, timestamp, request_hash }
    }

    pub fn hash_fields(client: ClientId, operation: &[u8], timestamp: u64) -> Digest {
        let mut buf = Vec::with_capacity(24 + operation.len());
        enc_u64(&mut buf, client.0);
        enc_bytes(&mut buf, operation);
        enc_u64(&mut buf, timestamp);
        digest(&buf)
    }

    /// The null request: reserved client, empty operation, timestamp zero.
    /// Fills sequence-number gaps during epoch changes; executes as a no-op.
    pub fn null() -> Self {
        Request::new(NULL_CLIENT, Vec::new(), 0)
    }

    pub fn is_null(&self) -> bool {
        self.client == NULL_CLIENT
    }
}

/// Proposal unit: a batch of requests bound to a global sequence number and
/// epoch. `opt_ref` points at the pack a re-run replaces, if any.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Pack {
    pub sn: u64,
    pub epoch: u64,
    pub requests: Vec<Request>,
    pub p_certs: Option<CombinedSignature>,
    pub c_certs: Option<CombinedSignature>,
    pub opt_ref: Option<Digest>,
}

impl Pack {
    pub fn new(sn: u64, epoch: u64, requests: Vec<Request>, opt_ref: Option<Digest>) -> Self {
        Pack { sn, epoch, requests, p_certs: None, c_certs: None, opt_ref }
    }

    /// Identity digest: covers sequence number, epoch, the request hashes and
    /// the re-run reference, but not attached certificates. This is the `d`
    /// that prepare-phase partial signatures sign.
    pub fn identity(&self) -> Digest {
        let hashes: Vec<Digest> = self.requests.iter().map(|r| r.request_hash).collect();
        pack_identity_parts(self.sn, self.epoch, &hashes, &self.opt_ref)
    }
}

/// [`Pack::identity`] from its preimage parts, without building the pack.
/// Validators use this to check that epoch-change evidence reproduces the
/// digest its certificates cover.
pub fn pack_identity_parts(sn: u64, epoch: u64, request_hashes: &[Digest], opt_ref: &Option<Digest>) -> Digest {
    let mut buf = Vec::with_capacity(64);
    enc_u64(&mut buf, sn);
    enc_u64(&mut buf, epoch);
    enc_u64(&mut buf, request_hashes.len() as u64);
    for h in request_hashes {
        buf.extend_from_slice(&h.0);
    }
    enc_opt_digest(&mut buf, opt_ref);
    digest(&buf)
}

/// Hash of the null request, cached: gap fills during epoch changes are
/// recognized by this value.
pub fn null_request_hash() -> Digest {
    static CACHE: std::sync::OnceLock<Digest> = std::sync::OnceLock::new();
    *CACHE.get_or_init(|| Request::null().request_hash)
}

/// Stable-checkpoint evidence for one leader: local checkpoint height in the
/// source epoch, the digest over the covered pack identities, and the
/// combined certificate (absent for the genesis height 0).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CheckpointEvidence {
    pub epoch: u64,
    pub local_sn: u64,
    pub content: Digest,
    pub cert: Option<CombinedSignature>,
}

impl CheckpointEvidence {
    pub fn genesis(epoch: u64) -> Self {
        CheckpointEvidence { epoch, local_sn: 0, content: Digest::ZERO, cert: None }
    }
}

/// Prepared-but-not-committed evidence: the pack's identity and epoch plus
/// its prepared certificate.
///
/// `client`, `r_hash` and `opt_ref` reproduce the evidenced pack's identity
/// preimage, so a validator can recompute the digest the certificate covers
/// and a new epoch can rebuild the pack for a re-run without its body. A
/// lying preimage fails the recomputation; a lying `client` only misroutes
/// the re-run's bucket, never its content.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PreparedEvidence {
    pub pack_epoch: u64,
    pub pack_digest: Digest,
    pub client: ClientId,
    pub r_hash: Digest,
    pub opt_ref: Option<Digest>,
    pub prepared: CombinedSignature,
}

/// Committed evidence. Carries the prepared certificate too: commit-phase
/// partials sign over the prepared certificate, so the commit certificate is
/// only verifiable alongside it. Identity-preimage fields as in
/// [`PreparedEvidence`].
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CommittedEvidence {
    pub pack_epoch: u64,
    pub pack_digest: Digest,
    pub client: ClientId,
    pub r_hash: Digest,
    pub opt_ref: Option<Digest>,
    pub prepared: CombinedSignature,
    pub committed: CombinedSignature,
}

/// Per-replica epoch-change object: for every leader, the best stable
/// checkpoint plus prepared-only (`p`) and committed (`q`) entries above it,
/// keyed by the source epoch's local sequence numbers. `p` and `q` are
/// disjoint by construction.
///
/// The object is self-contained: `source` and `source_conf` name the epoch
/// and configuration its coordinates live in. Because a configuration's slot
/// assignment is reproducible from its wire form, a validator holding the
/// source configuration maps every local here to its global on its own — the
/// sender cannot lie about placement, only fail validation.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EpochChangeObj {
    /// Target epoch this object calls for.
    pub epoch: u64,
    pub replica: ReplicaId,
    /// Epoch the sender was in; all evidence below is in its coordinates.
    pub source: u64,
    /// Identity of the source epoch's delivered configuration. Validators
    /// wait until they hold it before judging the rest.
    pub source_conf: Digest,
    pub sc: BTreeMap<ReplicaId, CheckpointEvidence>,
    pub p: BTreeMap<ReplicaId, BTreeMap<u64, PreparedEvidence>>,
    pub q: BTreeMap<ReplicaId, BTreeMap<u64, CommittedEvidence>>,
}

impl EpochChangeObj {
    pub fn identity(&self) -> Digest {
        digest(&encode_eco(self))
    }
}

/// A signed epoch-change message; also the element type of `NewEpoch`'s
/// proof set.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EpochChangeMsg {
    pub eco: EpochChangeObj,
    pub ec_cert: PartialSignature,
    pub e_hash: Digest,
}

/// Next-epoch configuration payload spread by reliable broadcast. The full
/// assignment is derivable from the proof set; the digest pins it so
/// validation is a byte-equality check.
///
/// `prev_live` and `achieved_prev` chain each delivered configuration to its
/// newest delivered predecessor with that predecessor's per-leader committed
/// counts, so any replica holding the chain reconstructs the same capacity
/// and performance history without replaying old proof sets. `fresh_base`
/// must equal the predecessor's `fresh_base` plus its total capacity, which
/// keeps fresh global ranges disjoint from everything any earlier epoch could
/// have assigned.
///
/// `capacities`, `hanging` and `fresh_base` together reproduce the epoch's
/// entire per-leader slot assignment, so the wire alone answers "which global
/// sits at local `l` of lane `v`" — the property every placement check in the
/// change machinery leans on.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct EpochConfigWire {
    pub epoch: u64,
    pub capacities: Vec<u64>,
    /// Newest delivered epoch preceding this one; 0 for the first epoch.
    pub prev_live: u64,
    /// Identity of `prev_live`'s configuration (zero for the first epoch),
    /// chaining configurations by digest so the history walk is unambiguous
    /// even when a stray configuration was delivered for some target.
    pub prev_conf: Digest,
    /// Committed slots per leader under `prev_live`; empty for the first
    /// epoch. The epoch's recorded performance is the sum.
    pub achieved_prev: Vec<u64>,
    /// Carried-over globals per leader, occupying each lane's first locals.
    pub hanging: BTreeMap<ReplicaId, Vec<u64>>,
    /// First global sequence number of this epoch's fresh slots.
    pub fresh_base: u64,
    pub assignment_digest: Digest,
}

impl EpochConfigWire {
    pub fn identity(&self) -> Digest {
        digest(&encode_conf_wire(self))
    }

    /// Recorded performance of the predecessor: total committed slots.
    pub fn committed_prev(&self) -> u64 {
        self.achieved_prev.iter().sum()
    }

    /// One past the largest global this epoch can assign; the successor's
    /// `fresh_base`.
    pub fn global_bound(&self) -> u64 {
        self.fresh_base + self.capacities.iter().sum::<u64>()
    }
}

/// The complete message set. Kind tags follow the order the formats were
/// specified in and are stable.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum ProtocolMessage {
    /// Leader's proposal for one of its slots.
    PrePrepare { leader: ReplicaId, pack: Pack, sig: PartialSignature },
    /// Backup's prepare share, sent to the slot's leader.
    Prepare { backup: ReplicaId, hash: Digest, p_cert: PartialSignature },
    /// Leader's combined prepared certificate, broadcast.
    Prepared { leader: ReplicaId, hash: Digest, p_cert: CombinedSignature },
    /// Backup's commit share, sent to the slot's leader.
    Commit { backup: ReplicaId, hash: Digest, c_cert: PartialSignature },
    /// Leader's combined commit certificate, broadcast.
    Committed { leader: ReplicaId, hash: Digest, c_cert: CombinedSignature },
    /// Client request, broadcast to all replicas. `auth` is the client's
    /// (unmetered) authentication tag.
    RequestMsg { client: ClientId, request: Request, r_hash: Digest, auth: Digest },
    /// Execution reply to the issuing client.
    Answer { replica: ReplicaId, sn: u64, epoch: u64, response: Digest, r_hash: Digest, auth: Digest },
    /// Backup's checkpoint share for a leader's local height, sent to that
    /// leader.
    NewCheckpoint { backup: ReplicaId, c_sn: u64, digest: Digest, c_cert: PartialSignature },
    /// Leader's combined checkpoint certificate, broadcast.
    Checkpointed { leader: ReplicaId, c_sn: u64, digest: Digest, c_cert: CombinedSignature },
    /// Replica calls for an epoch change.
    EpochChange(EpochChangeMsg),
    /// Primary's start-the-epoch message with the eco superset and proof set.
    NewEpoch {
        primary: ReplicaId,
        eco: EpochChangeObj,
        ec_cert: PartialSignature,
        e_hash: Digest,
        eco_proof: Vec<EpochChangeMsg>,
    },
    /// Initial round of the configuration's reliable broadcast.
    NewEpochConf { primary: ReplicaId, config: EpochConfigWire, conf_hash: Digest, sig: PartialSignature },
    /// Reliable-broadcast echo round.
    RbEcho { replica: ReplicaId, conf_hash: Digest, sig: PartialSignature },
    /// Reliable-broadcast ready round.
    RbReady { replica: ReplicaId, conf_hash: Digest, sig: PartialSignature },
    /// Ask any peer for a pack by identity digest (plumbing).
    Fetch { replica: ReplicaId, wanted: Digest, auth: Digest },
    /// Reply carrying the requested pack (plumbing).
    FetchReply { replica: ReplicaId, pack: Pack, auth: Digest },
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::PrePrepare { .. } => "pre-prepare",
            ProtocolMessage::Prepare { .. } => "prepare",
            ProtocolMessage::Prepared { .. } => "prepared",
            ProtocolMessage::Commit { .. } => "commit",
            ProtocolMessage::Committed { .. } => "committed",
            ProtocolMessage::RequestMsg { .. } => "request",
            ProtocolMessage::Answer { .. } => "answer",
            ProtocolMessage::NewCheckpoint { .. } => "new-checkpoint",
            ProtocolMessage::Checkpointed { .. } => "checkpointed",
            ProtocolMessage::EpochChange(_) => "epoch-change",
            ProtocolMessage::NewEpoch { .. } => "new-epoch",
            ProtocolMessage::NewEpochConf { .. } => "new-epoch-conf",
            ProtocolMessage::RbEcho { .. } => "rb-echo",
            ProtocolMessage::RbReady { .. } => "rb-ready",
            ProtocolMessage::Fetch { .. } => "fetch",
            ProtocolMessage::FetchReply { .. } => "fetch-reply",
        }
    }
}

// Kind tags.
const TAG_PREPREPARE: u8 = 8;
const TAG_PREPARE: u8 = 9;
const TAG_PREPARED: u8 = 10;
const TAG_COMMIT: u8 = 11;
const TAG_COMMITTED: u8 = 12;
const TAG_REQUEST: u8 = 13;
const TAG_ANSWER: u8 = 14;
const TAG_NEW_CHECKPOINT: u8 = 15;
const TAG_CHECKPOINTED: u8 = 16;
const TAG_EPOCH_CHANGE: u8 = 17;
const TAG_NEW_EPOCH: u8 = 18;
const TAG_NEW_EPOCH_CONF: u8 = 19;
const TAG_RB_ECHO: u8 = 20;
const TAG_RB_READY: u8 = 21;
const TAG_FETCH: u8 = 22;
const TAG_FETCH_REPLY: u8 = 23;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input ended early (wanted {wanted} more bytes at offset {at})")]
    UnexpectedEof { at: usize, wanted: usize },
    #[error("unknown message tag {0}")]
    BadTag(u8),
    #[error("option marker must be 0 or 1, got {0}")]
    BadOption(u8),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("length prefix {0} exceeds remaining input")]
    BadLength(u64),
    #[error("map keys not in strictly ascending order")]
    UnsortedMap,
}

// --- primitive writers ---

pub fn enc_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn enc_digest(buf: &mut Vec<u8>, d: &Digest) {
    buf.extend_from_slice(&d.0);
}

fn enc_bytes(buf: &mut Vec<u8>, b: &[u8]) {
    enc_u64(buf, b.len() as u64);
    buf.extend_from_slice(b);
}

fn enc_opt_digest(buf: &mut Vec<u8>, d: &Option<Digest>) {
    match d {
        None => buf.push(0),
        Some(d) => {
            buf.push(1);
            enc_digest(buf, d);
        }
    }
}

fn enc_partial(buf: &mut Vec<u8>, p: &PartialSignature) {
    enc_u64(buf, p.signer.0);
    enc_digest(buf, &p.over);
    enc_digest(buf, &p.tag);
}

fn enc_combined(buf: &mut Vec<u8>, c: &CombinedSignature) {
    enc_digest(buf, &c.over);
    enc_u64(buf, c.contributors.len() as u64);
    for r in &c.contributors {
        enc_u64(buf, r.0);
    }
    enc_digest(buf, &c.tag);
}

fn enc_opt_combined(buf: &mut Vec<u8>, c: &Option<CombinedSignature>) {
    match c {
        None => buf.push(0),
        Some(c) => {
            buf.push(1);
            enc_combined(buf, c);
        }
    }
}

fn enc_request(buf: &mut Vec<u8>, r: &Request) {
    enc_u64(buf, r.client.0);
    enc_bytes(buf, &r.operation);
    enc_u64(buf, r.timestamp);
    enc_digest(buf, &r.request_hash);
}

fn enc_pack(buf: &mut Vec<u8>, p: &Pack) {
    enc_u64(buf, p.sn);
    enc_u64(buf, p.epoch);
    enc_u64(buf, p.requests.len() as u64);
    for r in &p.requests {
        enc_request(buf, r);
    }
    enc_opt_combined(buf, &p.p_certs);
    enc_opt_combined(buf, &p.c_certs);
    enc_opt_digest(buf, &p.opt_ref);
}

pub fn encode_eco(eco: &EpochChangeObj) -> Vec<u8> {
    let mut buf = Vec::with_capacity(256);
    enc_u64(&mut buf, eco.epoch);
    enc_u64(&mut buf, eco.replica.0);
    enc_u64(&mut buf, eco.source);
    enc_digest(&mut buf, &eco.source_conf);
    enc_u64(&mut buf, eco.sc.len() as u64);
    for (v, ev) in &eco.sc {
        enc_u64(&mut buf, v.0);
        enc_u64(&mut buf, ev.epoch);
        enc_u64(&mut buf, ev.local_sn);
        enc_digest(&mut buf, &ev.content);
        enc_opt_combined(&mut buf, &ev.cert);
    }
    enc_u64(&mut buf, eco.p.len() as u64);
    for (v, slots) in &eco.p {
        enc_u64(&mut buf, v.0);
        enc_u64(&mut buf, slots.len() as u64);
        for (sn, ev) in slots {
            enc_u64(&mut buf, *sn);
            enc_u64(&mut buf, ev.pack_epoch);
            enc_digest(&mut buf, &ev.pack_digest);
            enc_u64(&mut buf, ev.client.0);
            enc_digest(&mut buf, &ev.r_hash);
            enc_opt_digest(&mut buf, &ev.opt_ref);
            enc_combined(&mut buf, &ev.prepared);
        }
    }
    enc_u64(&mut buf, eco.q.len() as u64);
    for (v, slots) in &eco.q {
        enc_u64(&mut buf, v.0);
        enc_u64(&mut buf, slots.len() as u64);
        for (sn, ev) in slots {
            enc_u64(&mut buf, *sn);
            enc_u64(&mut buf, ev.pack_epoch);
            enc_digest(&mut buf, &ev.pack_digest);
            enc_u64(&mut buf, ev.client.0);
            enc_digest(&mut buf, &ev.r_hash);
            enc_opt_digest(&mut buf, &ev.opt_ref);
            enc_combined(&mut buf, &ev.prepared);
            enc_combined(&mut buf, &ev.committed);
        }
    }
    buf
}

fn enc_ec_msg(buf: &mut Vec<u8>, m: &EpochChangeMsg) {
    let eco = encode_eco(&m.eco);
    enc_bytes(buf, &eco);
    enc_partial(buf, &m.ec_cert);
    enc_digest(buf, &m.e_hash);
}

pub fn encode_conf_wire(c: &EpochConfigWire) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64);
    enc_u64(&mut buf, c.epoch);
    enc_u64(&mut buf, c.capacities.len() as u64);
    for cap in &c.capacities {
        enc_u64(&mut buf, *cap);
    }
    enc_u64(&mut buf, c.prev_live);
    enc_digest(&mut buf, &c.prev_conf);
    enc_u64(&mut buf, c.achieved_prev.len() as u64);
    for a in &c.achieved_prev {
        enc_u64(&mut buf, *a);
    }
    enc_u64(&mut buf, c.hanging.len() as u64);
    for (v, globals) in &c.hanging {
        enc_u64(&mut buf, v.0);
        enc_u64(&mut buf, globals.len() as u64);
        for g in globals {
            enc_u64(&mut buf, *g);
        }
    }
    enc_u64(&mut buf, c.fresh_base);
    enc_digest(&mut buf, &c.assignment_digest);
    buf
}

pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(128);
    match msg {
        ProtocolMessage::PrePrepare { leader, pack, sig } => {
            buf.push(TAG_PREPREPARE);
            enc_u64(&mut buf, leader.0);
            enc_pack(&mut buf, pack);
            enc_partial(&mut buf, sig);
        }
        ProtocolMessage::Prepare { backup, hash, p_cert } => {
            buf.push(TAG_PREPARE);
            enc_u64(&mut buf, backup.0);
            enc_digest(&mut buf, hash);
            enc_partial(&mut buf, p_cert);
        }
        ProtocolMessage::Prepared { leader, hash, p_cert } => {
            buf.push(TAG_PREPARED);
            enc_u64(&mut buf, leader.0);
            enc_digest(&mut buf, hash);
            enc_combined(&mut buf, p_cert);
        }
        ProtocolMessage::Commit { backup, hash, c_cert } => {
            buf.push(TAG_COMMIT);
            enc_u64(&mut buf, backup.0);
            enc_digest(&mut buf, hash);
            enc_partial(&mut buf, c_cert);
        }
        ProtocolMessage::Committed { leader, hash, c_cert } => {
            buf.push(TAG_COMMITTED);
            enc_u64(&mut buf, leader.0);
            enc_digest(&mut buf, hash);
            enc_combined(&mut buf, c_cert);
        }
        ProtocolMessage::RequestMsg { client, request, r_hash, auth } => {
            buf.push(TAG_REQUEST);
            enc_u64(&mut buf, client.0);
            enc_request(&mut buf, request);
            enc_digest(&mut buf, r_hash);
            enc_digest(&mut buf, auth);
        }
        ProtocolMessage::Answer { replica, sn, epoch, response, r_hash, auth } => {
            buf.push(TAG_ANSWER);
            enc_u64(&mut buf, replica.0);
            enc_u64(&mut buf, *sn);
            enc_u64(&mut buf, *epoch);
            enc_digest(&mut buf, response);
            enc_digest(&mut buf, r_hash);
            enc_digest(&mut buf, auth);
        }
        ProtocolMessage::NewCheckpoint { backup, c_sn, digest, c_cert } => {
            buf.push(TAG_NEW_CHECKPOINT);
            enc_u64(&mut buf, backup.0);
            enc_u64(&mut buf, *c_sn);
            enc_digest(&mut buf, digest);
            enc_partial(&mut buf, c_cert);
        }
        ProtocolMessage::Checkpointed { leader, c_sn, digest, c_cert } => {
            buf.push(TAG_CHECKPOINTED);
            enc_u64(&mut buf, leader.0);
            enc_u64(&mut buf, *c_sn);
            enc_digest(&mut buf, digest);
            enc_combined(&mut buf, c_cert);
        }
        ProtocolMessage::EpochChange(m) => {
            buf.push(TAG_EPOCH_CHANGE);
            enc_ec_msg(&mut buf, m);
        }
        ProtocolMessage::NewEpoch { primary, eco, ec_cert, e_hash, eco_proof } => {
            buf.push(TAG_NEW_EPOCH);
            enc_u64(&mut buf, primary.0);
            let eco_bytes = encode_eco(eco);
            enc_bytes(&mut buf, &eco_bytes);
            enc_partial(&mut buf, ec_cert);
            enc_digest(&mut buf, e_hash);
            enc_u64(&mut buf, eco_proof.len() as u64);
            for m in eco_proof {
                enc_ec_msg(&mut buf, m);
            }
        }
        ProtocolMessage::NewEpochConf { primary, config, conf_hash, sig } => {
            buf.push(TAG_NEW_EPOCH_CONF);
            enc_u64(&mut buf, primary.0);
            let cw = encode_conf_wire(config);
            enc_bytes(&mut buf, &cw);
            enc_digest(&mut buf, conf_hash);
            enc_partial(&mut buf, sig);
        }
        ProtocolMessage::RbEcho { replica, conf_hash, sig } => {
            buf.push(TAG_RB_ECHO);
            enc_u64(&mut buf, replica.0);
            enc_digest(&mut buf, conf_hash);
            enc_partial(&mut buf, sig);
        }
        ProtocolMessage::RbReady { replica, conf_hash, sig } => {
            buf.push(TAG_RB_READY);
            enc_u64(&mut buf, replica.0);
            enc_digest(&mut buf, conf_hash);
            enc_partial(&mut buf, sig);
        }
        ProtocolMessage::Fetch { replica, wanted, auth } => {
            buf.push(TAG_FETCH);
            enc_u64(&mut buf, replica.0);
            enc_digest(&mut buf, wanted);
            enc_digest(&mut buf, auth);
        }
        ProtocolMessage::FetchReply { replica, pack, auth } => {
            buf.push(TAG_FETCH_REPLY);
            enc_u64(&mut buf, replica.0);
            enc_pack(&mut buf, pack);
            enc_digest(&mut buf, auth);
        }
    }
    buf
}

// --- reader ---

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.pos + n > self.buf.len() {
            return Err(DecodeError::UnexpectedEof { at: self.pos, wanted: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, DecodeError> {
        let v = self.u64()?;
        if v > (self.buf.len() - self.pos) as u64 {
            return Err(DecodeError::BadLength(v));
        }
        Ok(v as usize)
    }

    fn digest(&mut self) -> Result<Digest, DecodeError> {
        let s = self.take(32)?;
        Ok(Digest(s.try_into().unwrap()))
    }

    fn opt_digest(&mut self) -> Result<Option<Digest>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.digest()?)),
            b => Err(DecodeError::BadOption(b)),
        }
    }

    fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let n = self.len()?;
        Ok(self.take(n)?.to_vec())
    }

    fn partial(&mut self) -> Result<PartialSignature, DecodeError> {
        Ok(PartialSignature { signer: ReplicaId(self.u64()?), over: self.digest()?, tag: self.digest()? })
    }

    fn combined(&mut self) -> Result<CombinedSignature, DecodeError> {
        let over = self.digest()?;
        let n = self.len()?;
        let mut contributors = BTreeSet::new();
        let mut prev: Option<u64> = None;
        for _ in 0..n {
            let id = self.u64()?;
            if let Some(p) = prev {
                if id <= p {
                    return Err(DecodeError::UnsortedMap);
                }
            }
            prev = Some(id);
            contributors.insert(ReplicaId(id));
        }
        let tag = self.digest()?;
        Ok(CombinedSignature { over, contributors, tag })
    }

    fn opt_combined(&mut self) -> Result<Option<CombinedSignature>, DecodeError> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.combined()?)),
            b => Err(DecodeError::BadOption(b)),
        }
    }

    fn request(&mut self) -> Result<Request, DecodeError> {
        Ok(Request {
            client: ClientId(self.u64()?),
            operation: self.bytes()?,
            timestamp: self.u64()?,
            request_hash: self.digest()?,
        })
    }

    fn pack(&mut self) -> Result<Pack, DecodeError> {
        let sn = self.u64()?;
        let epoch = self.u64()?;
        let n = self.len()?;
        let mut requests = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            requests.push(self.request()?);
        }
        Ok(Pack {
            sn,
            epoch,
            requests,
            p_certs: self.opt_combined()?,
            c_certs: self.opt_combined()?,
            opt_ref: self.opt_digest()?,
        })
    }

    fn eco(&mut self) -> Result<EpochChangeObj, DecodeError> {
        let epoch = self.u64()?;
        let replica = ReplicaId(self.u64()?);
        let source = self.u64()?;
        let source_conf = self.digest()?;
        let mut sc = BTreeMap::new();
        let n = self.len()?;
        let mut prev: Option<u64> = None;
        for _ in 0..n {
            let v = self.u64()?;
            check_ascending(&mut prev, v)?;
            let ev = CheckpointEvidence {
                epoch: self.u64()?,
                local_sn: self.u64()?,
                content: self.digest()?,
                cert: self.opt_combined()?,
            };
            sc.insert(ReplicaId(v), ev);
        }
        let mut p = BTreeMap::new();
        let n = self.len()?;
        let mut prev: Option<u64> = None;
        for _ in 0..n {
            let v = self.u64()?;
            check_ascending(&mut prev, v)?;
            let slots_n = self.len()?;
            let mut slots = BTreeMap::new();
            let mut sprev: Option<u64> = None;
            for _ in 0..slots_n {
                let sn = self.u64()?;
                check_ascending(&mut sprev, sn)?;
                let ev = PreparedEvidence {
                    pack_epoch: self.u64()?,
                    pack_digest: self.digest()?,
                    client: ClientId(self.u64()?),
                    r_hash: self.digest()?,
                    opt_ref: self.opt_digest()?,
                    prepared: self.combined()?,
                };
                slots.insert(sn, ev);
            }
            p.insert(ReplicaId(v), slots);
        }
        let mut q = BTreeMap::new();
        let n = self.len()?;
        let mut prev: Option<u64> = None;
        for _ in 0..n {
            let v = self.u64()?;
            check_ascending(&mut prev, v)?;
            let slots_n = self.len()?;
            let mut slots = BTreeMap::new();
            let mut sprev: Option<u64> = None;
            for _ in 0..slots_n {
                let sn = self.u64()?;
                check_ascending(&mut sprev, sn)?;
                let ev = CommittedEvidence {
                    pack_epoch: self.u64()?,
                    pack_digest: self.digest()?,
                    client: ClientId(self.u64()?),
                    r_hash: self.digest()?,
                    opt_ref: self.opt_digest()?,
                    prepared: self.combined()?,
                    committed: self.combined()?,
                };
                slots.insert(sn, ev);
            }
            q.insert(ReplicaId(v), slots);
        }
        Ok(EpochChangeObj { epoch, replica, source, source_conf, sc, p, q })
    }

    fn ec_msg(&mut self) -> Result<EpochChangeMsg, DecodeError> {
        let eco_bytes = self.bytes()?;
        let mut inner = Reader::new(&eco_bytes);
        let eco = inner.eco()?;
        if inner.pos != eco_bytes.len() {
            return Err(DecodeError::TrailingBytes(eco_bytes.len() - inner.pos));
        }
        Ok(EpochChangeMsg { eco, ec_cert: self.partial()?, e_hash: self.digest()? })
    }

    fn conf_wire(&mut self) -> Result<EpochConfigWire, DecodeError> {
        let epoch = self.u64()?;
        let n = self.len()?;
        let mut capacities = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            capacities.push(self.u64()?);
        }
        let prev_live = self.u64()?;
        let prev_conf = self.digest()?;
        let n = self.len()?;
        let mut achieved_prev = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            achieved_prev.push(self.u64()?);
        }
        let mut hanging = BTreeMap::new();
        let n = self.len()?;
        let mut prev: Option<u64> = None;
        for _ in 0..n {
            let v = self.u64()?;
            check_ascending(&mut prev, v)?;
            let len = self.len()?;
            let mut globals = Vec::with_capacity(len.min(1024));
            let mut gprev: Option<u64> = None;
            for _ in 0..len {
                let g = self.u64()?;
                check_ascending(&mut gprev, g)?;
                globals.push(g);
            }
            hanging.insert(ReplicaId(v), globals);
        }
        Ok(EpochConfigWire {
            epoch,
            capacities,
            prev_live,
            prev_conf,
            achieved_prev,
            hanging,
            fresh_base: self.u64()?,
            assignment_digest: self.digest()?,
        })
    }
}

fn check_ascending(prev: &mut Option<u64>, v: u64) -> Result<(), DecodeError> {
    if let Some(p) = *prev {
        if v <= p {
            return Err(DecodeError::UnsortedMap);
        }
    }
    *prev = Some(v);
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let mut r = Reader::new(bytes);
    let tag = r.u8()?;
    let msg = match tag {
        TAG_PREPREPARE => ProtocolMessage::PrePrepare {
            leader: ReplicaId(r.u64()?),
            pack: r.pack()?,
            sig: r.partial()?,
        },
        TAG_PREPARE => ProtocolMessage::Prepare {
            backup: ReplicaId(r.u64()?),
            hash: r.digest()?,
            p_cert: r.partial()?,
        },
        TAG_PREPARED => ProtocolMessage::Prepared {
            leader: ReplicaId(r.u64()?),
            hash: r.digest()?,
            p_cert: r.combined()?,
        },
        TAG_COMMIT => ProtocolMessage::Commit {
            backup: ReplicaId(r.u64()?),
            hash: r.digest()?,
            c_cert: r.partial()?,
        },
        TAG_COMMITTED => ProtocolMessage::Committed {
            leader: ReplicaId(r.u64()?),
            hash: r.digest()?,
            c_cert: r.combined()?,
        },
        TAG_REQUEST => ProtocolMessage::RequestMsg {
            client: ClientId(r.u64()?),
            request: r.request()?,
            r_hash: r.digest()?,
            auth: r.digest()?,
        },
        TAG_ANSWER => ProtocolMessage::Answer {
            replica: ReplicaId(r.u64()?),
            sn: r.u64()?,
            epoch: r.u64()?,
            response: r.digest()?,
            r_hash: r.digest()?,
            auth: r.digest()?,
        },
        TAG_NEW_CHECKPOINT => ProtocolMessage::NewCheckpoint {
            backup: ReplicaId(r.u64()?),
            c_sn: r.u64()?,
            digest: r.digest()?,
            c_cert: r.partial()?,
        },
        TAG_CHECKPOINTED => ProtocolMessage::Checkpointed {
            leader: ReplicaId(r.u64()?),
            c_sn: r.u64()?,
            digest: r.digest()?,
            c_cert: r.combined()?,
        },
        TAG_EPOCH_CHANGE => ProtocolMessage::EpochChange(r.ec_msg()?),
        TAG_NEW_EPOCH => {
            let primary = ReplicaId(r.u64()?);
            let eco_bytes = r.bytes()?;
            let mut inner = Reader::new(&eco_bytes);
            let eco = inner.eco()?;
            if inner.pos != eco_bytes.len() {
                return Err(DecodeError::TrailingBytes(eco_bytes.len() - inner.pos));
            }
            let ec_cert = r.partial()?;
            let e_hash = r.digest()?;
            let n = r.len()?;
            let mut eco_proof = Vec::with_capacity(n.min(64));
            for _ in 0..n {
                eco_proof.push(r.ec_msg()?);
            }
            ProtocolMessage::NewEpoch { primary, eco, ec_cert, e_hash, eco_proof }
        }
        TAG_NEW_EPOCH_CONF => {
            let primary = ReplicaId(r.u64()?);
            let cw = r.bytes()?;
            let mut inner = Reader::new(&cw);
            let config = inner.conf_wire()?;
            if inner.pos != cw.len() {
                return Err(DecodeError::TrailingBytes(cw.len() - inner.pos));
            }
            ProtocolMessage::NewEpochConf { primary, config, conf_hash: r.digest()?, sig: r.partial()? }
        }
        TAG_RB_ECHO => ProtocolMessage::RbEcho {
            replica: ReplicaId(r.u64()?),
            conf_hash: r.digest()?,
            sig: r.partial()?,
        },
        TAG_RB_READY => ProtocolMessage::RbReady {
            replica: ReplicaId(r.u64()?),
            conf_hash: r.digest()?,
            sig: r.partial()?,
        },
        TAG_FETCH => ProtocolMessage::Fetch {
            replica: ReplicaId(r.u64()?),
            wanted: r.digest()?,
            auth: r.digest()?,
        },
        TAG_FETCH_REPLY => ProtocolMessage::FetchReply {
            replica: ReplicaId(r.u64()?),
            pack: r.pack()?,
            auth: r.digest()?,
        },
        t => return Err(DecodeError::BadTag(t)),
    };
    if r.pos != bytes.len() {
        return Err(DecodeError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(msg)
}

/// Unmetered authentication tag for client requests, answers and plumbing
/// messages. Deterministic so replicas can check it structurally; its
/// creation and verification never touch the authenticator meter because the
/// operation counts only cover replica-side protocol authenticators.
pub fn auth_tag(domain: &str, id: u64, over: &Digest) -> Digest {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(domain.as_bytes());
    enc_u64(&mut buf, id);
    buf.extend_from_slice(&over.0);
    buf.extend_from_slice(crate::crypto::mock_secret());
    digest(&buf)
}
