//! Byzantine behavior as an output filter.
//!
//! Corrupted replicas run the ordinary state machine; corruption is applied
//! to what leaves the machine, per role. This mirrors the strongest
//! adversary the analysis allows: full knowledge of the corrupted replica's
//! state, but no ability to forge correct replicas' signatures or touch
//! traffic between correct peers. The filter sees only a corrupted
//! replica's own outbox, so that restriction is structural.
//!
//! The worst damage available to each role is surprisingly tame-looking:
//!
//! * A corrupted **leader** proposes a full watermark window and then never
//!   finishes anything — backups burn verifications and shares on requests
//!   that will only commit after the next epoch reseeds them.
//! * A corrupted **backup** just stays silent, shaving the co-signing
//!   surplus without ever producing evidence of misbehavior.
//! * A corrupted **primary** either aborts its epoch-change outright, or —
//!   nastier — starts the epoch for so few replicas that the epoch limps
//!   along at drip rate without ever looking stalled.

use crate::replica::Destination;
use crate::types::{ProtocolMessage, ReplicaId};
use std::collections::BTreeMap;

/// What a corrupted replica does with its own lane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeaderRole {
    Honest,
    /// Propose up to the watermark window, collect shares, but never release
    /// a prepared or committed certificate: the lane fills with hanging
    /// requests and commits nothing.
    Hang,
}

/// What it does for other leaders' lanes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackupRole {
    Honest,
    /// No prepare/commit/checkpoint shares, ever.
    Silent,
    /// Shares for at most one request per lane per `window` of time — the
    /// minimum participation that keeps a starving quorum moving.
    Drip { window: u64 },
}

/// What it does when the rotation hands it an epoch-change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimaryRole {
    Honest,
    /// Collect the quorum, assemble the epoch, publish nothing. Correct
    /// replicas burn one change timeout and move to the next target.
    Abort,
    /// Publish the new epoch to only `reach` correct replicas, chosen by
    /// lowest id. The rest see the configuration (recipients flood it) but
    /// never the proof that starts the epoch.
    Partial { reach: usize },
}

#[derive(Clone, Copy, Default, Debug)]
struct DripGate {
    prepare_at: u64,
    commit_at: u64,
}

/// Per-replica corruption: role strategies plus the filter's own state.
#[derive(Clone, Debug)]
pub struct Corruption {
    /// Crash-level silence. Overrides everything else.
    pub mute: bool,
    pub leader: LeaderRole,
    pub backup: BackupRole,
    pub primary: PrimaryRole,
    gates: BTreeMap<ReplicaId, DripGate>,
}

impl Corruption {
    pub fn honest_roles() -> Self {
        Corruption {
            mute: false,
            leader: LeaderRole::Honest,
            backup: BackupRole::Honest,
            primary: PrimaryRole::Honest,
            gates: BTreeMap::new(),
        }
    }

    /// Filter one outbox. `me` is the corrupted replica, `correct` the
    /// replicas outside the corrupted set in id order.
    pub fn filter(
        &mut self,
        me: ReplicaId,
        now: u64,
        correct: &[ReplicaId],
        outbox: Vec<(Destination, ProtocolMessage)>,
    ) -> Vec<(Destination, ProtocolMessage)> {
        if self.mute {
            return Vec::new();
        }
        let mut kept = Vec::new();
        for (dest, msg) in outbox {
            match &msg {
                // Own-lane certificates are the leader role's to withhold.
                // Pre-prepares always flow: the hanging strategy wants the
                // window full.
                ProtocolMessage::Prepared { leader, .. }
                | ProtocolMessage::Committed { leader, .. }
                | ProtocolMessage::Checkpointed { leader, .. }
                    if *leader == me && self.leader == LeaderRole::Hang =>
                {
                    continue;
                }

                // Share traffic toward another lane's leader is backup work.
                ProtocolMessage::Prepare { .. }
                | ProtocolMessage::Commit { .. }
                | ProtocolMessage::NewCheckpoint { .. } => {
                    let Destination::Replica(lane) = dest else {
                        kept.push((dest, msg));
                        continue;
                    };
                    if lane == me {
                        kept.push((dest, msg));
                        continue;
                    }
                    match &self.backup {
                        BackupRole::Honest => kept.push((dest, msg)),
                        BackupRole::Silent => {}
                        BackupRole::Drip { window } => {
                            let window = *window;
                            let gate = self.gates.entry(lane).or_default();
                            let at = match &msg {
                                ProtocolMessage::Prepare { .. } => &mut gate.prepare_at,
                                ProtocolMessage::Commit { .. } => &mut gate.commit_at,
                                // Checkpoint shares are withheld outright;
                                // the correct backups alone are exactly
                                // enough to certify.
                                _ => continue,
                            };
                            if now >= *at {
                                *at = now + window;
                                kept.push((dest, msg));
                            }
                        }
                    }
                }

                ProtocolMessage::NewEpoch { .. } | ProtocolMessage::NewEpochConf { .. } => {
                    match self.primary {
                        PrimaryRole::Honest => kept.push((dest, msg)),
                        PrimaryRole::Abort => {}
                        PrimaryRole::Partial { reach } => {
                            for &v in correct.iter().filter(|&&v| v != me).take(reach) {
                                kept.push((Destination::Replica(v), msg.clone()));
                            }
                        }
                    }
                }

                // Change participation, echoes, answers, and plumbing pass
                // through: none of them can mislead a correct replica, and a
                // turning epoch wheel is what the hanging strategies want.
                _ => kept.push((dest, msg)),
            }
        }
        kept
    }
}

/// Named strategy bundles, as selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    None,
    /// Leaders hang their lane; as backups they stay silent.
    HangLeader,
    /// Crashed from the start.
    Unresponsive,
    /// Correct everywhere except when primary: the change is silently
    /// dropped and the target dies on the change timeout.
    AbortPrimary,
    /// As primary, start the epoch for only `s` correct replicas and drip
    /// just enough backup shares to keep it alive.
    PartialInit(usize),
    /// Everything at once: hanging lane, silent backup, aborting primary.
    Mixed,
}

impl Profile {
    /// The corruption to install on each corrupted replica, or `None` for an
    /// all-correct run. `drip_window` calibrates `PartialInit` participation
    /// and should sit just under the no-progress timeout.
    pub fn corruption(self, drip_window: u64) -> Option<Corruption> {
        let mut c = Corruption::honest_roles();
        match self {
            Profile::None => return None,
            Profile::HangLeader => {
                c.leader = LeaderRole::Hang;
                c.backup = BackupRole::Silent;
            }
            Profile::Unresponsive => c.mute = true,
            Profile::AbortPrimary => c.primary = PrimaryRole::Abort,
            Profile::PartialInit(s) => {
                c.primary = PrimaryRole::Partial { reach: s };
                c.backup = BackupRole::Drip { window: drip_window };
            }
            Profile::Mixed => {
                c.leader = LeaderRole::Hang;
                c.backup = BackupRole::Silent;
                c.primary = PrimaryRole::Abort;
            }
        }
        Some(c)
    }

    pub fn parse(s: &str) -> Result<Profile, String> {
        Ok(match s {
            "none" => Profile::None,
            "hang-leader" => Profile::HangLeader,
            "unresponsive" => Profile::Unresponsive,
            "abort-primary" => Profile::AbortPrimary,
            "mixed" => Profile::Mixed,
            _ => match s.strip_prefix("partial-init:") {
                Some(arg) => {
                    let s_val: usize = arg
                        .parse()
                        .map_err(|_| format!("partial-init wants a count, got {arg:?}"))?;
                    Profile::PartialInit(s_val)
                }
                None => return Err(format!("unknown adversary {s:?}")),
            },
        })
    }

    pub fn name(self) -> String {
        match self {
            Profile::None => "none".into(),
            Profile::HangLeader => "hang-leader".into(),
            Profile::Unresponsive => "unresponsive".into(),
            Profile::AbortPrimary => "abort-primary".into(),
            Profile::PartialInit(s) => format!("partial-init:{s}"),
            Profile::Mixed => "mixed".into(),
        }
    }
}

/// How the adversary spends its scheduling power before stabilization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreGstPolicy {
    /// Uniformly random delays up to the allowed cap.
    Random,
    /// Everything toward one victim crawls at the cap; the rest of the
    /// system races ahead — the classic way to split a quorum's view.
    SlowVictim(ReplicaId),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::unmetered_share;
    use crate::types::{digest, ClientId, Digest};

    fn share(id: u64) -> crate::crypto::PartialSignature {
        unmetered_share(ReplicaId(id), digest(b"x"))
    }

    fn combined() -> crate::crypto::CombinedSignature {
        let mut meter = crate::crypto::AuthenticatorMeter::new();
        crate::crypto::combine(&share(0), &[share(1), share(2)], 3, &mut meter).unwrap()
    }

    fn h() -> Digest {
        digest(b"x")
    }

    fn sample_conf(primary: ReplicaId) -> ProtocolMessage {
        ProtocolMessage::NewEpochConf {
            primary,
            config: crate::types::EpochConfigWire {
                epoch: 2,
                capacities: vec![20; 4],
                prev_live: 1,
                prev_conf: h(),
                achieved_prev: vec![20; 4],
                hanging: std::collections::BTreeMap::new(),
                fresh_base: 81,
                assignment_digest: h(),
            },
            conf_hash: h(),
            sig: share(3),
        }
    }

    fn broadcast(msg: ProtocolMessage) -> (Destination, ProtocolMessage) {
        (Destination::AllReplicas, msg)
    }

    fn to(v: u64, msg: ProtocolMessage) -> (Destination, ProtocolMessage) {
        (Destination::Replica(ReplicaId(v)), msg)
    }

    fn correct() -> Vec<ReplicaId> {
        vec![ReplicaId(0), ReplicaId(1), ReplicaId(2)]
    }

    #[test]
    fn hang_leader_suppresses_only_own_lane_certificates() {
        let me = ReplicaId(3);
        let mut c = Corruption::honest_roles();
        c.leader = LeaderRole::Hang;
        let outbox = vec![
            broadcast(ProtocolMessage::Prepared { leader: me, hash: h(), p_cert: combined() }),
            broadcast(ProtocolMessage::Committed { leader: me, hash: h(), c_cert: combined() }),
            broadcast(ProtocolMessage::Checkpointed { leader: me, c_sn: 5, digest: h(), c_cert: combined() }),
            // Backup shares toward lane 0 are untouched with an honest
            // backup role.
            to(0, ProtocolMessage::Prepare { backup: me, hash: h(), p_cert: share(3) }),
            to(0, ProtocolMessage::Commit { backup: me, hash: h(), c_cert: share(3) }),
        ];
        let kept = c.filter(me, 0, &correct(), outbox);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|(_, m)| matches!(
            m,
            ProtocolMessage::Prepare { .. } | ProtocolMessage::Commit { .. }
        )));
    }

    #[test]
    fn silent_backup_keeps_own_lane_and_change_traffic() {
        let me = ReplicaId(3);
        let mut c = Corruption::honest_roles();
        c.backup = BackupRole::Silent;
        let outbox = vec![
            to(0, ProtocolMessage::Prepare { backup: me, hash: h(), p_cert: share(3) }),
            to(1, ProtocolMessage::NewCheckpoint { backup: me, c_sn: 5, digest: h(), c_cert: share(3) }),
            // Own-lane certificate: leader work, not backup work.
            broadcast(ProtocolMessage::Prepared { leader: me, hash: h(), p_cert: combined() }),
        ];
        let kept = c.filter(me, 0, &correct(), outbox);
        assert_eq!(kept.len(), 1);
        assert!(matches!(kept[0].1, ProtocolMessage::Prepared { .. }));
    }

    #[test]
    fn drip_passes_one_share_per_lane_per_window() {
        let me = ReplicaId(3);
        let mut c = Corruption::honest_roles();
        c.backup = BackupRole::Drip { window: 100 };
        let prep = |_: u64| to(0, ProtocolMessage::Prepare { backup: me, hash: h(), p_cert: share(3) });
        // Two prepares at t=0 for the same lane: only the first passes.
        let kept = c.filter(me, 0, &correct(), vec![prep(0), prep(0)]);
        assert_eq!(kept.len(), 1);
        // Still gated at t=99; open again at t=100.
        assert!(c.filter(me, 99, &correct(), vec![prep(0)]).is_empty());
        assert_eq!(c.filter(me, 100, &correct(), vec![prep(0)]).len(), 1);
        // A different lane has its own gate, and commits gate separately.
        let kept = c.filter(
            me,
            0,
            &correct(),
            vec![
                to(1, ProtocolMessage::Prepare { backup: me, hash: h(), p_cert: share(3) }),
                to(1, ProtocolMessage::Commit { backup: me, hash: h(), c_cert: share(3) }),
            ],
        );
        assert_eq!(kept.len(), 2);
        // Checkpoint shares never pass the drip.
        let kept = c.filter(
            me,
            500,
            &correct(),
            vec![to(1, ProtocolMessage::NewCheckpoint { backup: me, c_sn: 5, digest: h(), c_cert: share(3) })],
        );
        assert!(kept.is_empty());
    }

    #[test]
    fn abort_primary_drops_epoch_publication_only() {
        let me = ReplicaId(3);
        let mut c = Corruption::honest_roles();
        c.primary = PrimaryRole::Abort;
        let conf_msg = ProtocolMessage::RbEcho { replica: me, conf_hash: h(), sig: share(3) };
        let outbox = vec![
            broadcast(sample_conf(me)),
            broadcast(conf_msg.clone()),
        ];
        let kept = c.filter(me, 0, &correct(), outbox);
        assert_eq!(kept, vec![broadcast(conf_msg)]);
    }

    #[test]
    fn partial_init_reaches_exactly_s_lowest_correct() {
        let me = ReplicaId(3);
        let mut c = Corruption::honest_roles();
        c.primary = PrimaryRole::Partial { reach: 2 };
        let msg = ProtocolMessage::RbEcho { replica: me, conf_hash: h(), sig: share(3) };
        let conf = sample_conf(me);
        let kept = c.filter(me, 0, &correct(), vec![broadcast(conf.clone()), broadcast(msg)]);
        let dests: Vec<Destination> = kept
            .iter()
            .filter(|(_, m)| matches!(m, ProtocolMessage::NewEpochConf { .. }))
            .map(|&(d, _)| d)
            .collect();
        assert_eq!(dests, vec![Destination::Replica(ReplicaId(0)), Destination::Replica(ReplicaId(1))]);
    }

    #[test]
    fn mute_silences_everything() {
        let me = ReplicaId(3);
        let mut c = Profile::Unresponsive.corruption(100).unwrap();
        let outbox = vec![
            broadcast(ProtocolMessage::Prepared { leader: me, hash: h(), p_cert: combined() }),
            (
                Destination::Client(ClientId(9)),
                ProtocolMessage::Answer {
                    replica: me,
                    sn: 1,
                    epoch: 1,
                    response: h(),
                    r_hash: h(),
                    auth: h(),
                },
            ),
        ];
        assert!(c.filter(me, 0, &correct(), outbox).is_empty());
    }

    #[test]
    fn profile_parsing_roundtrips() {
        for name in ["none", "hang-leader", "unresponsive", "abort-primary", "partial-init:2", "mixed"] {
            assert_eq!(Profile::parse(name).unwrap().name(), name);
        }
        assert!(Profile::parse("chaos").is_err());
        assert!(Profile::parse("partial-init:x").is_err());
    }
}
