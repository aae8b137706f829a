//! Replica state-machine tests.
//!
//! The `Cluster` harness wires `n` replicas together with a FIFO message
//! queue and nothing else: no clock, no network model, no threads. Timers are
//! logged, never fired, unless a test fires one by hand — so any test that
//! completes here was driven purely by messages, which is the strongest
//! determinism check available at this level.

use super::change::{
    assignment_digest, canonical_history, derive_genesis, derive_new_epoch, enter_epoch,
    reproduce, ConfigChain,
};
use super::*;
use crate::crypto::{combine, unmetered_share, CombinedSignature, OpCounts};
use crate::types::{
    digest, pack_identity_parts, CheckpointEvidence, CommittedEvidence, Digest, EpochChangeObj,
    EpochConfigWire, PreparedEvidence,
};

fn test_cfg(id: u64) -> ReplicaConfig {
    ReplicaConfig {
        params: SystemParams::from_f(1),
        id: ReplicaId(id),
        m: 1,
        k: 5,
        c_min: 20,
        g: 13,
        epoch_timer: 12_800,
        progress_timer: 2_560,
        change_timer: 100,
        delta: 10,
    }
}

#[test]
fn config_sanity() {
    let r = Replica::new(test_cfg(0));
    assert_eq!(r.epoch(), 0);
    assert!(!r.in_change());
}

// ---- harness -----------------------------------------------------------------

struct Cluster {
    replicas: Vec<Replica>,
    queue: VecDeque<(usize, ProtocolMessage)>,
    answers: Vec<(ClientId, ProtocolMessage)>,
    obs: Vec<Vec<Observation>>,
    timers: Vec<Vec<TimerReq>>,
}

impl Cluster {
    fn boot() -> Cluster {
        Cluster::boot_with(test_cfg)
    }

    fn boot_with(cfg: impl Fn(u64) -> ReplicaConfig) -> Cluster {
        let n = cfg(0).params.n;
        let mut c = Cluster {
            replicas: (0..n as u64).map(|i| Replica::new(cfg(i))).collect(),
            queue: VecDeque::new(),
            answers: Vec::new(),
            obs: vec![Vec::new(); n],
            timers: vec![Vec::new(); n],
        };
        for i in 0..n {
            let out = c.replicas[i].handle(Event::Init);
            c.absorb(i, out);
        }
        c
    }

    fn absorb(&mut self, src: usize, out: Outputs) {
        self.timers[src].extend(out.timers);
        self.obs[src].extend(out.observations);
        for (dst, m) in out.msgs {
            match dst {
                Destination::AllReplicas => {
                    // Broadcast excludes the sender; self-effects are applied
                    // locally by the replica itself.
                    for i in 0..self.replicas.len() {
                        if i != src {
                            self.queue.push_back((i, m.clone()));
                        }
                    }
                }
                Destination::Replica(v) => self.queue.push_back((v.0 as usize, m)),
                Destination::Client(cl) => self.answers.push((cl, m)),
            }
        }
    }

    fn deliver_all(&mut self) {
        let mut steps = 0u64;
        while let Some((dst, m)) = self.queue.pop_front() {
            steps += 1;
            assert!(steps < 1_000_000, "message storm: cluster did not settle");
            let out = self.replicas[dst].handle(Event::Message(m));
            self.absorb(dst, out);
        }
    }

    /// Queue one client request to every replica; returns its hash.
    fn submit(&mut self, client: ClientId, ts: u64) -> Digest {
        let req = Request::new(client, b"op".to_vec(), ts);
        let r_hash = req.request_hash;
        let msg = ProtocolMessage::RequestMsg {
            client,
            request: req,
            r_hash,
            auth: auth_tag("req", client.0, &r_hash),
        };
        for i in 0..self.replicas.len() {
            self.queue.push_back((i, msg.clone()));
        }
        r_hash
    }

    /// Fire the most recently requested timer of this kind on one replica.
    fn fire(&mut self, v: usize, kind: TimerKind) {
        let req = *self.timers[v]
            .iter()
            .rev()
            .find(|t| t.kind == kind)
            .expect("timer of that kind was never requested");
        let out = self.replicas[v].handle(Event::Timer { kind: req.kind, gen: req.gen });
        self.absorb(v, out);
    }

    /// Smallest client id whose bucket lane `v` serves in the current epoch.
    fn client_of_lane(&self, v: u64) -> ClientId {
        let buckets = &self.replicas[0].active.as_ref().unwrap().buckets;
        (1u64..100_000)
            .map(ClientId)
            .find(|&c| buckets.leader_for(c) == ReplicaId(v))
            .expect("every lane serves some client id")
    }

    fn refusals(&self, v: usize) -> usize {
        self.obs[v]
            .iter()
            .filter(|o| matches!(o, Observation::Refused { .. }))
            .count()
    }

    fn entered(&self, v: usize, epoch: u64) -> bool {
        self.obs[v]
            .iter()
            .any(|o| matches!(o, Observation::EnteredEpoch { epoch: e } if *e == epoch))
    }
}

/// Global sequence number of lane `v`'s local slot `l` in the first epoch:
/// fresh numbers are dealt round-robin in id order, one per lane per round.
fn genesis_global(v: u64, l: u64) -> u64 {
    (l - 1) * 4 + v + 1
}

// ---- normal operation --------------------------------------------------------

#[test]
fn boot_enters_first_epoch() {
    let cl = Cluster::boot();
    assert!(cl.queue.is_empty(), "boot alone sends nothing");
    let id0 = cl.replicas[0].active.as_ref().unwrap().wire.identity();
    for (i, r) in cl.replicas.iter().enumerate() {
        assert_eq!(r.epoch(), 1);
        let active = r.active.as_ref().unwrap();
        assert_eq!(active.wire.capacities, vec![20; 4]);
        assert_eq!(active.wire.fresh_base, 1);
        assert_eq!(active.wire.prev_live, 0);
        assert_eq!(active.wire.identity(), id0, "configurations disagree at boot");
        assert!(cl.entered(i, 1));
        assert!(cl.timers[i].iter().any(|t| t.kind == TimerKind::Epoch));
        assert!(cl.timers[i].iter().any(|t| t.kind == TimerKind::ArmProgress));
    }
}

#[test]
fn single_request_commits_and_answers_everywhere() {
    let mut cl = Cluster::boot();
    let client = cl.client_of_lane(2);
    let r_hash = cl.submit(client, 1);
    cl.deliver_all();

    let global = genesis_global(2, 1);
    for (i, r) in cl.replicas.iter().enumerate() {
        let commits: Vec<_> = cl.obs[i]
            .iter()
            .filter_map(|o| match o {
                Observation::Committed { global, leader, null, .. } => {
                    Some((*global, *leader, *null))
                }
                _ => None,
            })
            .collect();
        assert_eq!(commits, vec![(global, ReplicaId(2), false)]);
        assert_eq!(r.executed.len(), 1);
        assert_eq!(r.executed.get(&global).unwrap().1, r_hash);
        assert_eq!(cl.refusals(i), 0);
    }
    assert_eq!(cl.answers.len(), 4, "one answer per replica");
    for (to, msg) in &cl.answers {
        assert_eq!(*to, client);
        let ProtocolMessage::Answer { sn, response, r_hash: rh, .. } = msg else {
            panic!("non-answer sent to a client");
        };
        assert_eq!(*sn, global);
        assert_eq!(*rh, r_hash);
        assert_eq!(*response, digest_parts(&[b"resp", &r_hash.0]));
    }
}

#[test]
fn replayed_request_answers_from_cache_without_crypto() {
    let mut cl = Cluster::boot();
    let client = cl.client_of_lane(0);
    cl.submit(client, 1);
    cl.deliver_all();
    assert_eq!(cl.answers.len(), 4);

    let before: Vec<OpCounts> = cl.replicas.iter().map(|r| r.meter.snapshot()).collect();
    cl.submit(client, 1); // identical retransmission
    cl.deliver_all();
    assert_eq!(cl.answers.len(), 8, "every replica repeats its cached answer");
    let after: Vec<OpCounts> = cl.replicas.iter().map(|r| r.meter.snapshot()).collect();
    assert_eq!(before, after, "answer retransmission must not touch the meter");
}

/// The headline accounting claim at desk scale, asserted with zero tolerance.
///
/// One full epoch at f=1, k=5, per-lane capacity 20, every slot carrying a
/// fresh request. Per replica and per fresh request: the slot's leader spends
/// 3 computed + 4 verified operations, each backup 2 computed + 3 verified;
/// per checkpoint block the leader spends 2+2 and each backup 1+1. Summed over
/// one lane of its own and three foreign lanes:
///
///   own:      20·(3+4) + 4·(2+2) = 156
///   foreign: 3·(20·(2+3) + 4·(1+1)) = 324
///
/// i.e. 200 computed + 280 verified = 480 operations — for 80 commits, a
/// 20/120 amortized rate. Any drift from 480 is a metering or protocol bug,
/// so this is an equality, not a bound. Afterwards every lane is exhausted,
/// which must carry the whole cluster into epoch 2 without any timer firing.
#[test]
fn full_epoch_exact_operation_counts() {
    let mut cl = Cluster::boot();
    let clients: Vec<ClientId> = (0..4).map(|v| cl.client_of_lane(v)).collect();
    let mut hashes = Vec::new();
    for &c in &clients {
        for ts in 1..=20 {
            hashes.push(cl.submit(c, ts));
        }
    }
    cl.deliver_all();

    let want = OpCounts { computed: 200, verified: 280 };
    for (i, r) in cl.replicas.iter().enumerate() {
        assert_eq!(
            r.meter.epoch_ops(1).operation,
            want,
            "replica {i} operation count drifted"
        );
        assert_eq!(r.epoch(), 2, "exhaustion must roll the epoch over");
        assert!(cl.entered(i, 2));
        assert_eq!(cl.refusals(i), 0);
        assert!(cl.obs[i]
            .iter()
            .any(|o| matches!(o, Observation::ChangeCalled { target: 2 })));

        let executed = &r.executed;
        assert_eq!(executed.len(), 80);
        assert_eq!(*executed.keys().next().unwrap(), 1);
        assert_eq!(*executed.keys().last().unwrap(), 80);
        assert_eq!(executed, &cl.replicas[0].executed, "execution histories diverge");

        // The negotiated second epoch: nothing left over, demand rule doubles
        // every exhausted lane, fresh range continues where epoch 1 ended.
        let wire = &r.active.as_ref().unwrap().wire;
        assert_eq!(wire.capacities, vec![40; 4]);
        assert_eq!(wire.fresh_base, 81);
        assert_eq!(wire.prev_live, 1);
        assert_eq!(wire.committed_prev(), 80);
        assert!(wire.hanging.values().all(|h| h.is_empty()));
        assert_eq!(
            wire.identity(),
            cl.replicas[0].active.as_ref().unwrap().wire.identity(),
            "replicas entered different second epochs"
        );
    }
    assert_eq!(cl.answers.len(), 320, "80 requests × 4 replicas");
    for h in &hashes {
        let copies = cl
            .answers
            .iter()
            .filter(|(_, m)| matches!(m, ProtocolMessage::Answer { r_hash, .. } if r_hash == h))
            .count();
        assert_eq!(copies, 4, "every request answered exactly once per replica");
    }
}

/// An epoch cut short by the epoch timer: three commits on one lane, nothing
/// anywhere else. The change must finalize the committed slots, reseed every
/// other in-window coordinate as a null, and the nulls must then run to
/// execution in the new epoch. Only two replicas get their timer fired; the
/// other two must join through the over-f adoption rule.
#[test]
fn partial_epoch_reseeds_unfinished_work() {
    let mut cl = Cluster::boot();
    let client = cl.client_of_lane(0);
    for ts in 1..=3 {
        cl.submit(client, ts);
    }
    cl.deliver_all();
    assert_eq!(cl.answers.len(), 12);

    cl.fire(0, TimerKind::Epoch);
    cl.fire(1, TimerKind::Epoch);
    cl.deliver_all();

    let id0 = cl.replicas[0].active.as_ref().unwrap().wire.identity();
    for (i, r) in cl.replicas.iter().enumerate() {
        assert_eq!(r.epoch(), 2, "replica {i} missed the change");
        assert!(cl.obs[i]
            .iter()
            .any(|o| matches!(o, Observation::ChangeCalled { target: 2 })),
            "replica {i} never announced — adoption rule failed");
        assert_eq!(cl.refusals(i), 0);

        let wire = &r.active.as_ref().unwrap().wire;
        assert_eq!(wire.identity(), id0);
        assert_eq!(wire.fresh_base, 81);
        assert_eq!(wire.capacities, vec![20; 4], "floor holds when demand was low");
        assert_eq!(wire.achieved_prev, vec![3, 0, 0, 0]);
        // Lane 0's three committed slots are not reseeded; the rest of each
        // lane's 2k-window is.
        let lane0: Vec<u64> = (4..=10).map(|l| genesis_global(0, l)).collect();
        assert_eq!(wire.hanging[&ReplicaId(0)], lane0);
        for v in 1..4u64 {
            let others: Vec<u64> = (1..=10).map(|l| genesis_global(v, l)).collect();
            assert_eq!(wire.hanging[&ReplicaId(v)], others);
        }

        let executed = &r.executed;
        assert_eq!(executed.len(), 40, "3 finalized + 37 nulls");
        let nulls = executed.values().filter(|(_, rh)| *rh == crate::types::null_request_hash()).count();
        assert_eq!(nulls, 37);
        assert_eq!(executed, &cl.replicas[0].executed);
    }
    // Null fills never answer anyone.
    assert_eq!(cl.answers.len(), 12);
}

// ---- derivation --------------------------------------------------------------

fn quorum_cert(over: Digest) -> CombinedSignature {
    let mut scratch = AuthenticatorMeter::new();
    let foreign: Vec<_> = (1..3).map(|v| unmetered_share(ReplicaId(v), over)).collect();
    combine(&unmetered_share(ReplicaId(0), over), &foreign, 3, &mut scratch).unwrap()
}

fn eco_base(replica: u64, target: u64, source: u64, conf: Digest) -> EpochChangeObj {
    EpochChangeObj {
        epoch: target,
        replica: ReplicaId(replica),
        source,
        source_conf: conf,
        sc: (0..4).map(|v| (ReplicaId(v), CheckpointEvidence::genesis(source))).collect(),
        p: BTreeMap::new(),
        q: BTreeMap::new(),
    }
}

fn signed(eco: EpochChangeObj) -> EpochChangeMsg {
    let e_hash = eco.identity();
    EpochChangeMsg { ec_cert: unmetered_share(eco.replica, e_hash), eco, e_hash }
}

fn prepared_ev(global: u64, pack_epoch: u64, client: u64) -> PreparedEvidence {
    let r_hash = digest(&client.to_le_bytes());
    let pack_digest = pack_identity_parts(global, pack_epoch, &[r_hash], &None);
    PreparedEvidence {
        pack_epoch,
        pack_digest,
        client: ClientId(client),
        r_hash,
        opt_ref: None,
        prepared: quorum_cert(pack_digest),
    }
}

fn committed_ev(global: u64, pack_epoch: u64, client: u64) -> CommittedEvidence {
    let p = prepared_ev(global, pack_epoch, client);
    let committed = quorum_cert(super::commit_domain(&p.prepared.tag));
    CommittedEvidence {
        pack_epoch,
        pack_digest: p.pack_digest,
        client: p.client,
        r_hash: p.r_hash,
        opt_ref: None,
        prepared: p.prepared,
        committed,
    }
}

/// Chain holding just the first-epoch configuration.
fn genesis_chain(cfg: &ReplicaConfig) -> (ConfigChain, EpochConfigWire) {
    let wire = derive_genesis(cfg).wire;
    let mut chain = ConfigChain::default();
    assert!(chain.insert(cfg.m, wire.clone()));
    (chain, wire)
}

/// Build a well-formed successor configuration and add it to the chain.
fn push_config(
    chain: &mut ConfigChain,
    cfg: &ReplicaConfig,
    prev: &EpochConfigWire,
    epoch: u64,
    capacities: Vec<u64>,
    achieved_prev: Vec<u64>,
    hanging: BTreeMap<ReplicaId, Vec<u64>>,
) -> EpochConfigWire {
    let mut w = EpochConfigWire {
        epoch,
        capacities,
        prev_live: prev.epoch,
        prev_conf: prev.identity(),
        achieved_prev,
        hanging,
        fresh_base: prev.global_bound(),
        assignment_digest: Digest::ZERO,
    };
    let (bk, sl) = reproduce(cfg.m, &w).unwrap();
    w.assignment_digest = assignment_digest(epoch, &bk, &sl);
    assert!(chain.insert(cfg.m, w.clone()));
    w
}

#[test]
fn committed_evidence_outranks_prepared() {
    let cfg = test_cfg(0);
    let (chain, g) = genesis_chain(&cfg);
    let gid = g.identity();

    // Two replicas prepared digest DP at global 1; one saw digest DC commit.
    let dp = prepared_ev(1, 1, 7);
    let dc = committed_ev(1, 1, 9);
    let mut e0 = eco_base(0, 2, 1, gid);
    e0.p.insert(ReplicaId(0), [(1u64, dp.clone())].into());
    let mut e1 = eco_base(1, 2, 1, gid);
    e1.p.insert(ReplicaId(0), [(1u64, dp.clone())].into());
    let mut e2 = eco_base(2, 2, 1, gid);
    e2.q.insert(ReplicaId(0), [(1u64, dc.clone())].into());

    let proof = [signed(e0), signed(e1), signed(e2)];
    let d = derive_new_epoch(&cfg, 2, &proof, &chain).unwrap();

    // Commit certificates are final regardless of how many replicas only
    // prepared something else there.
    assert_eq!(d.finalized[&1].identity(), dc.pack_digest);
    assert!(!d.hanging_packs.contains_key(&1));
    assert!(d.finalized[&1].requests[0].request_hash == dc.r_hash);

    // The rest of lane 0's 2k-window reseeds as nulls, as do the untouched
    // lanes' windows.
    let rest: Vec<u64> = (2..=10).map(|l| genesis_global(0, l)).collect();
    assert_eq!(d.wire.hanging[&ReplicaId(0)], rest);
    assert!(d.hanging_packs[&genesis_global(0, 2)].requests[0].is_null());
    assert_eq!(d.wire.capacities, vec![20; 4]);
    assert_eq!(d.wire.fresh_base, 81);
    assert_eq!(d.wire.achieved_prev, vec![1, 0, 0, 0]);
}

#[test]
fn later_source_epoch_wins_for_same_global() {
    let cfg = test_cfg(0);
    let (mut chain, g) = genesis_chain(&cfg);

    // Epoch 2 carried global 5 over as lane 0's first local slot.
    let b = push_config(
        &mut chain,
        &cfg,
        &g,
        2,
        vec![20; 4],
        vec![4, 0, 0, 0],
        [(ReplicaId(0), vec![5])].into(),
    );

    // One replica still holds epoch-1 prepared evidence for global 5 (lane
    // 0's second local slot there); two moved on to epoch 2, one of them with
    // fresher prepared evidence for the same global under its new identity.
    assert_eq!(genesis_global(0, 2), 5);
    let old = prepared_ev(5, 1, 7);
    let new = prepared_ev(5, 2, 11);
    let mut e0 = eco_base(0, 3, 1, g.identity());
    e0.p.insert(ReplicaId(0), [(2u64, old.clone())].into());
    let mut e1 = eco_base(1, 3, 2, b.identity());
    e1.p.insert(ReplicaId(0), [(1u64, new.clone())].into());
    let e2 = eco_base(2, 3, 2, b.identity());

    let proof = [signed(e0), signed(e1), signed(e2)];
    let d = derive_new_epoch(&cfg, 3, &proof, &chain).unwrap();

    let pack = &d.hanging_packs[&5];
    assert_eq!(pack.identity(), new.pack_digest, "older evidence shadowed the newer epoch's");
    assert_eq!(pack.epoch, 2);
    assert_eq!(d.wire.fresh_base, b.global_bound());
    assert_eq!(d.wire.prev_live, 2);
    assert_eq!(d.wire.prev_conf, b.identity());
}

#[test]
fn capacity_rule_doubles_exhausted_lanes() {
    let mut cfg = test_cfg(0);
    cfg.c_min = 100;
    let (chain, g) = genesis_chain(&cfg);
    assert_eq!(g.capacities, vec![100; 4]);

    let mut proof = Vec::new();
    for v in 0..3 {
        let mut e = eco_base(v, 2, 1, g.identity());
        for lane in 0..4 {
            e.sc.insert(
                ReplicaId(lane),
                CheckpointEvidence {
                    epoch: 1,
                    local_sn: 100,
                    content: digest(b"full"),
                    cert: Some(quorum_cert(digest(b"full"))),
                },
            );
        }
        proof.push(signed(e));
    }
    let d = derive_new_epoch(&cfg, 2, &proof, &chain).unwrap();
    assert_eq!(d.wire.capacities, vec![200; 4]);
    assert_eq!(d.wire.achieved_prev, vec![100; 4]);
    assert!(d.wire.hanging.values().all(|h| h.is_empty()));
    assert_eq!(d.wire.fresh_base, 401);
}

#[test]
fn capacity_rule_uses_recent_peak() {
    let mut cfg = test_cfg(0);
    cfg.k = 4;
    cfg.c_min = 16;
    let (mut chain, g) = genesis_chain(&cfg);
    // Epoch 2 ran at capacity 100 and records that epoch 1 achieved 80.
    let a = push_config(&mut chain, &cfg, &g, 2, vec![100; 4], vec![80; 4], BTreeMap::new());

    let mut proof = Vec::new();
    for v in 0..3 {
        let mut e = eco_base(v, 3, 2, a.identity());
        for lane in 0..4 {
            e.sc.insert(
                ReplicaId(lane),
                CheckpointEvidence {
                    epoch: 2,
                    local_sn: 60,
                    content: digest(b"part"),
                    cert: Some(quorum_cert(digest(b"part"))),
                },
            );
        }
        proof.push(signed(e));
    }
    let d = derive_new_epoch(&cfg, 3, &proof, &chain).unwrap();
    // 60 achieved now, 80 the epoch before: the recent peak wins over both
    // the floor (16) and the current figure.
    assert_eq!(d.wire.capacities, vec![80; 4]);
    assert_eq!(d.wire.achieved_prev, vec![60; 4]);
}

#[test]
fn capacity_rule_clamps_to_floor() {
    let mut cfg = test_cfg(0);
    cfg.k = 1;
    cfg.c_min = 7;
    let (mut chain, g) = genesis_chain(&cfg);
    let a = push_config(&mut chain, &cfg, &g, 2, vec![10; 4], vec![2; 4], BTreeMap::new());

    let mut proof = Vec::new();
    for v in 0..3 {
        let mut e = eco_base(v, 3, 2, a.identity());
        for lane in 0..4 {
            e.sc.insert(
                ReplicaId(lane),
                CheckpointEvidence {
                    epoch: 2,
                    local_sn: 3,
                    content: digest(b"slow"),
                    cert: Some(quorum_cert(digest(b"slow"))),
                },
            );
        }
        proof.push(signed(e));
    }
    let d = derive_new_epoch(&cfg, 3, &proof, &chain).unwrap();
    assert_eq!(d.wire.capacities, vec![7; 4], "demand below the floor gets the floor");
}

#[test]
fn canonical_history_counts_dead_epochs_as_idle_turns() {
    let cfg = test_cfg(0);
    let (mut chain, g) = genesis_chain(&cfg);
    // Epoch 2 died: the next live configuration is epoch 3, chaining
    // directly to epoch 1.
    let w3 = push_config(&mut chain, &cfg, &g, 3, vec![20; 4], vec![20, 0, 0, 0], BTreeMap::new());
    // Exploration hands epoch e to replica e−1; the dead epoch consumes
    // replica 1's turn even though it never ran.
    assert_eq!(canonical_history(&cfg, &w3, &chain).unwrap(), ReplicaId(2));

    let mut orphan = w3.clone();
    orphan.prev_conf = digest(b"nowhere");
    let (bk, sl) = reproduce(cfg.m, &orphan).unwrap();
    orphan.assignment_digest = assignment_digest(3, &bk, &sl);
    assert!(canonical_history(&cfg, &orphan, &chain).is_err());
}

// ---- entry guards ------------------------------------------------------------

#[test]
fn entry_refuses_target_below_announcement() {
    let mut cl = Cluster::boot();
    let cfg = cl.replicas[0].cfg.clone();
    let r = &mut cl.replicas[0];
    let mut out = Outputs::default();
    r.call_change(5, &mut out);
    assert_eq!(r.announced_target(), Some(5));

    let mut d3 = derive_genesis(&cfg);
    d3.wire.epoch = 3;
    enter_epoch(r, 3, d3, &mut out);
    assert_eq!(r.epoch(), 1, "entered below the announced target");
    assert!(out
        .observations
        .iter()
        .any(|o| matches!(o, Observation::Refused { target: 3, .. })));

    // Reaching the announced target itself is fine and clears the call.
    let mut d5 = derive_genesis(&cfg);
    d5.wire.epoch = 5;
    enter_epoch(r, 5, d5, &mut out);
    assert_eq!(r.epoch(), 5);
    assert!(!r.in_change());
}

#[test]
fn entry_refuses_fresh_range_behind_execution() {
    let mut cl = Cluster::boot();
    let cfg = cl.replicas[0].cfg.clone();
    let r = &mut cl.replicas[0];
    r.executed.insert(60, (digest(b"pack"), digest(b"req")));

    let mut out = Outputs::default();
    let mut d = derive_genesis(&cfg);
    d.wire.epoch = 2;
    d.wire.fresh_base = 50;
    enter_epoch(r, 2, d, &mut out);
    assert_eq!(r.epoch(), 1, "fresh range overlaps executed history");
    assert!(out
        .observations
        .iter()
        .any(|o| matches!(o, Observation::Refused { target: 2, .. })));

    let mut ok = derive_genesis(&cfg);
    ok.wire.epoch = 2;
    ok.wire.fresh_base = 61;
    enter_epoch(r, 2, ok, &mut out);
    assert_eq!(r.epoch(), 2);
}

#[test]
fn assignment_reproduction_is_exact() {
    let cfg = test_cfg(0);
    let g = derive_genesis(&cfg);
    let (bk, sl) = reproduce(cfg.m, &g.wire).unwrap();
    assert_eq!(assignment_digest(1, &bk, &sl), g.wire.assignment_digest);

    let mut w = g.wire.clone();
    w.capacities[2] += cfg.k;
    let (bk2, sl2) = reproduce(cfg.m, &w).unwrap();
    assert_ne!(assignment_digest(1, &bk2, &sl2), g.wire.assignment_digest);
}
